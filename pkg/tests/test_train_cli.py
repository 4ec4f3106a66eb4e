import dataclasses
from pathlib import Path

import numpy as np
import pytest

from jointseg import autodiff as ad
from jointseg import cli
from jointseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from jointseg.config import ConfigError, RunConfig, parse_config_text
from jointseg.optim import Adam
from jointseg.train import grad_check, load_network, train

TINY = dict(points_per_block=64, min_block_points=16, npoints=(16, 8, 4),
            nsamples=(8, 8, 8), num_scenes=2, iterations=5, batch_size=2,
            min_points_per_instance=40, max_points_per_instance=60)


def tiny_config(**kw):
    args = dict(TINY)
    args.update(kw)
    return RunConfig(**args)


# ---------------------------------------------------------------------------
# config

def test_config_parsing_round_trip():
    cfg = tiny_config(seed=9, early_stopping=True)
    parsed = parse_config_text("\n".join(cfg.to_kv_lines()))
    assert parsed == cfg


def test_config_parses_comments_booleans_tuples():
    cfg = parse_config_text("""
        # a comment
        seed = 11
        feature_fusion = false
        npoints = 64, 16, 4
        bandwidth = 0.8   # trailing comment
    """)
    assert cfg.seed == 11 and cfg.feature_fusion is False
    assert cfg.npoints == (64, 16, 4) and cfg.bandwidth == 0.8


def test_config_rejects_unknown_key_and_bad_values():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("not_a_key = 1")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config_text("iterations = soon")
    with pytest.raises(ConfigError):
        parse_config_text("learning_rate = 0")
    with pytest.raises(ConfigError):
        parse_config_text("batch_size = 0")


def test_config_digest_tracks_content():
    a = tiny_config()
    b = tiny_config(bandwidth=0.7)
    assert a.digest() == tiny_config().digest()
    assert a.digest() != b.digest()
    # bandwidth is an inference knob, not part of the model architecture
    assert a.model_digest() == b.model_digest()
    assert a.model_digest() != tiny_config(embedding_dim=7).model_digest()


# ---------------------------------------------------------------------------
# optimizer

def test_adam_zero_learning_rate_leaves_parameters_unchanged():
    p = ad.Parameter("w", np.ones((3, 3)))
    opt = Adam([p], lr=0.0)
    p.tensor.grad = np.full((3, 3), 2.0)
    before = p.values.copy()
    opt.step()
    assert np.array_equal(p.values, before)


def test_adam_step_decay_schedule():
    p = ad.Parameter("w", np.zeros((1, 1)))
    opt = Adam([p], lr=1.0, decay_factor=0.5, decay_every=2)
    seen = []
    for _ in range(5):
        seen.append(opt.current_lr())
        opt.step()
    assert seen == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_adam_skips_parameters_without_gradient():
    p = ad.Parameter("w", np.ones((2, 2)))
    opt = Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.values, np.ones((2, 2)))


# ---------------------------------------------------------------------------
# checkpointing

def test_checkpoint_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.standard_normal((4, 3)).astype(np.float32),
              "a.bias": rng.standard_normal((1, 3)).astype(np.float64)}
    state = {"m/a.weight": np.zeros((4, 3), dtype=np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params, state, 17, 17, "cfg" * 10, "model" * 6)
    save_checkpoint(p2, params, state, 17, 17, "cfg" * 10, "model" * 6)
    assert p1.read_bytes() == p2.read_bytes()

    ckpt = load_checkpoint(p1)
    assert ckpt.iteration == 17
    for name, arr in params.items():
        assert ckpt.parameters[name].tobytes() == arr.tobytes()
        assert ckpt.parameters[name].dtype == arr.dtype


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": np.zeros((2, 2), dtype=np.float32)}, {}, 1, 1, "d", "m")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_load_network_rejects_model_drift(tmp_path):
    cfg = tiny_config(iterations=1)
    result = train(cfg, tmp_path / "run")
    other = tiny_config(iterations=1, embedding_dim=7)
    with pytest.raises(CheckpointError, match="different model"):
        load_network(other, result.checkpoint_path)
    # a matching config loads fine
    net = load_network(cfg, result.checkpoint_path)
    assert len(net.parameters()) == 42


# ---------------------------------------------------------------------------
# training loop

def test_training_is_deterministic(tmp_path):
    cfg = tiny_config(seed=5)
    r1 = train(cfg, tmp_path / "a")
    r2 = train(cfg, tmp_path / "b")
    assert Path(r1.trace_path).read_bytes() == Path(r2.trace_path).read_bytes()
    assert Path(r1.checkpoint_path).read_bytes() == Path(r2.checkpoint_path).read_bytes()


def test_training_reduces_loss_on_tiny_run(tmp_path):
    cfg = tiny_config(iterations=60, batch_size=2, seed=1)
    result = train(cfg, tmp_path / "run")
    assert result.iterations_run == 60
    assert result.losses[-1] < result.losses[0]


def test_early_stopping_halts_before_budget(tmp_path):
    # zero-ish patience with an lr too small to improve validation loss
    cfg = tiny_config(iterations=300, early_stopping=True, patience=2,
                      learning_rate=1e-12, seed=2)
    result = train(cfg, tmp_path / "run")
    assert result.stopped_early
    assert result.iterations_run < 300


def test_random_sample_stays_deterministic(tmp_path):
    cfg = tiny_config(random_sample=True, iterations=8, seed=3)
    r1 = train(cfg, tmp_path / "a")
    r2 = train(cfg, tmp_path / "b")
    assert r1.losses == r2.losses


def test_num_classes_mismatch_is_config_error(tmp_path):
    scenes = tmp_path / "scenes"
    cli.main(["gen-data", "--config",
              write_config(tmp_path / "g.cfg", tiny_config(num_classes=4)),
              "--out", str(scenes)])
    cfg = tiny_config(num_classes=2, data_dir=str(scenes))
    with pytest.raises(ConfigError, match="num_classes"):
        train(cfg, tmp_path / "run")


# ---------------------------------------------------------------------------
# gradient check entry point

def test_grad_check_passes_tolerance():
    report = grad_check(entries_per_param=2)
    assert report.max_rel_error < 1e-5
    assert report.entries_checked > 50
    assert "gradient check" in report.to_text()


# ---------------------------------------------------------------------------
# CLI

def write_config(path, cfg: RunConfig):
    path.write_text("\n".join(cfg.to_kv_lines()) + "\n")
    return str(path)


def test_cli_end_to_end(tmp_path, capsys):
    scenes_dir = tmp_path / "scenes"
    cfg = tiny_config(seed=4, data_dir=str(scenes_dir), iterations=4)
    cfg_path = write_config(tmp_path / "run.cfg", cfg)

    assert cli.main(["gen-data", "--config", cfg_path, "--out", str(scenes_dir)]) == 0
    assert len(list(scenes_dir.glob("*.scene"))) == cfg.num_scenes

    run_dir = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--out", str(run_dir)]) == 0
    assert (run_dir / "model.ckpt").exists()
    assert (run_dir / "loss_trace.txt").exists()

    out_dir = tmp_path / "pred"
    scene_path = sorted(scenes_dir.glob("*.scene"))[0]
    assert cli.main(["infer", "--config", cfg_path, "--checkpoint",
                     str(run_dir / "model.ckpt"), "--scene", str(scene_path),
                     "--out", str(out_dir)]) == 0
    result_path = out_dir / "scene_000.result"
    assert result_path.exists()

    assert cli.main(["eval", "--result", str(result_path), "--scene", str(scene_path),
                     "--out", str(tmp_path / "report")]) == 0
    report = (tmp_path / "report" / "report.kv").read_text()
    assert "mWCov" in report

    captured = capsys.readouterr()
    assert "mIoU" in captured.out


def test_cli_grad_check_exit_code(tmp_path):
    assert cli.main(["grad-check"]) == 0


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = -1\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG


def test_cli_data_error_exit_code(tmp_path):
    cfg_path = write_config(tmp_path / "c.cfg", tiny_config())
    code = cli.main(["eval", "--result", str(tmp_path / "missing.result"),
                     "--scene", str(tmp_path / "missing.scene")])
    assert code == cli.EXIT_DATA


def test_cli_checkpoint_error_exit_code(tmp_path):
    scenes = tmp_path / "scenes"
    cfg = tiny_config(seed=6, data_dir=str(scenes), iterations=2)
    cfg_path = write_config(tmp_path / "c.cfg", cfg)
    cli.main(["gen-data", "--config", cfg_path, "--out", str(scenes)])
    cli.main(["train", "--config", cfg_path, "--out", str(tmp_path / "run")])

    drifted = write_config(tmp_path / "d.cfg", dataclasses.replace(cfg, embedding_dim=9))
    code = cli.main(["infer", "--config", drifted, "--checkpoint",
                     str(tmp_path / "run" / "model.ckpt"),
                     "--scene", str(sorted(scenes.glob('*.scene'))[0]),
                     "--out", str(tmp_path / "pred")])
    assert code == cli.EXIT_CHECKPOINT
