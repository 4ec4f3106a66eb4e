"""Shared encoder and twin decoders over point features.

The encoder stacks downsample-group-summarize layers (sample centers by
farthest-point sampling, gather ball neighborhoods, run a shared per-point
MLP on relative-coordinate-augmented features, max-reduce per group) down to
a coarse level of 512-wide features. Two structurally identical but
independently parameterized decoders upsample back to full resolution with
inverse-square-distance interpolation over 3 nearest neighbors plus skip
connections, each exposing its last three layer outputs for feature fusion.

All point selections and interpolation weights depend only on coordinates,
never on parameters, so they are precomputed into a ``BlockGeometry`` that a
training loop can cache across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Conv1x1, collect_parameters


@dataclass
class LayerSpec:
    """Per-level geometry and width configuration of the encoder."""

    npoints: tuple[int, int, int] = (128, 32, 8)
    widths: tuple[int, int, int] = (64, 128, 256)
    radii: tuple[float, float, float] = (0.2, 0.4, 0.8)
    nsamples: tuple[int, int, int] = (16, 16, 16)
    density_reweight: bool = False
    encoder_width: int = 512
    in_channels: int = 9
    # decoder output widths for the coarse/mid/full levels
    decoder_widths: tuple[int, int, int] = (256, 128, 128)

    def __post_init__(self):
        pts = list(self.npoints)
        if any(pts[i] <= pts[i + 1] for i in range(len(pts) - 1)) or pts[-1] < 1:
            raise ValueError(f"npoints must be strictly decreasing and >= 1, got {self.npoints}")
        if self.encoder_width != 512:
            raise ValueError("final encoder width is fixed at 512")


@dataclass
class DecoderFeatures:
    """Last three decoder layer outputs with their point coordinates.

    full: (N_a, 128), mid: (N_b, 128), coarse: (N_c, 256).
    """

    full: ad.Tensor
    mid: ad.Tensor
    coarse: ad.Tensor
    coords_full: np.ndarray
    coords_mid: np.ndarray
    coords_coarse: np.ndarray


# ---------------------------------------------------------------------------
# geometric primitives (pure numpy; selections are constants to the graph)

def farthest_point_sampling(coords: np.ndarray, m: int) -> np.ndarray:
    """Indices of m points chosen by iterative farthest-point selection.

    The first pick is index 0 and distance ties resolve to the lowest index,
    so the result is deterministic.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if m > n:
        raise ValueError(f"cannot sample {m} points from {n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    dists = np.linalg.norm(coords - coords[0], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dists))  # first max = lowest index on ties
        chosen[i] = nxt
        dists = np.minimum(dists, np.linalg.norm(coords - coords[nxt], axis=1))
    return chosen


def ball_group(coords: np.ndarray, centers: np.ndarray, radius: float,
               max_neighbors: int) -> np.ndarray:
    """Per center, up to ``max_neighbors`` point indices within ``radius``.

    Candidates are ordered by (distance, index); the center itself (distance
    zero when centers are drawn from ``coords``) is always included, and any
    deficit is padded by repeating the first neighbor.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    coords = np.asarray(coords, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d = np.linalg.norm(centers[:, None, :] - coords[None, :, :], axis=2)  # (m, N)
    order = np.argsort(d, axis=1, kind="stable")  # stable => index breaks ties
    out = np.empty((centers.shape[0], max_neighbors), dtype=np.int64)
    for i in range(centers.shape[0]):
        cand = order[i][d[i, order[i]] <= radius]
        if cand.size == 0:
            cand = order[i][:1]  # isolated center off the point set: nearest point
        take = cand[:max_neighbors]
        out[i, : take.size] = take
        out[i, take.size:] = take[0]
    return out


def _inverse_density_scale(coords: np.ndarray, idx: np.ndarray, bandwidth: float) -> np.ndarray:
    """Per grouped point, a normalized inverse kernel-density estimate.

    Density is a Gaussian KDE over each neighborhood; scales are normalized
    to mean 1 within the group so feature magnitudes stay comparable.
    """
    grouped = coords[idx]  # (m, ns, 3)
    diff = grouped[:, :, None, :] - grouped[:, None, :, :]
    d2 = (diff ** 2).sum(-1)
    density = np.exp(-d2 / (2 * bandwidth ** 2)).mean(axis=2)  # (m, ns)
    inv = 1.0 / np.maximum(density, 1e-12)
    return inv / inv.mean(axis=1, keepdims=True)


def nearest_neighbor_interpolation(fine_coords: np.ndarray, coarse_coords: np.ndarray,
                                   k: int = 3, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Indices and normalized inverse-square-distance weights of the k nearest
    coarse points for every fine point. Distance ties resolve to the lowest
    coarse index; weights form a convex combination."""
    fine = np.asarray(fine_coords, dtype=np.float64)
    coarse = np.asarray(coarse_coords, dtype=np.float64)
    if coarse.shape[0] == 0:
        raise ValueError("no coarse points to interpolate from")
    k = min(k, coarse.shape[0])
    d = np.linalg.norm(fine[:, None, :] - coarse[None, :, :], axis=2)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    nd = np.take_along_axis(d, order, axis=1)
    w = 1.0 / (nd ** 2 + eps)
    w = w / w.sum(axis=1, keepdims=True)
    return order, w


def interpolation_matrix(fine_coords: np.ndarray, coarse_coords: np.ndarray,
                         k: int = 3, eps: float = 1e-8) -> np.ndarray:
    """The 3-nearest-neighbor interpolation as a dense (N_fine, N_coarse)
    row-stochastic matrix, so upsampling becomes one matrix product."""
    idx, w = nearest_neighbor_interpolation(fine_coords, coarse_coords, k, eps)
    mat = np.zeros((fine_coords.shape[0], coarse_coords.shape[0]))
    np.put_along_axis(mat, idx, w, axis=1)
    return mat


@dataclass
class BlockGeometry:
    """Coordinate-derived constants of one block, reusable across iterations.

    levels: coordinates at each resolution, fine to coarse.
    sa_indices / sa_rel / sa_scale: per encoder layer, the flattened neighbor
    indices, relative neighbor coordinates, and optional density scales.
    fp_mats: interpolation matrices for the three decoder upsampling steps.
    fusion_mid / fusion_coarse: interpolation matrices to full resolution for
    the feature-fusion heads.
    """

    levels: list[np.ndarray]
    sa_indices: list[np.ndarray]
    sa_rel: list[ad.Tensor]
    sa_scale: list[ad.Tensor | None]
    fp_mats: list[ad.Tensor]
    fusion_mid: ad.Tensor
    fusion_coarse: ad.Tensor


# ---------------------------------------------------------------------------
# layers

class SetAbstraction:
    """One downsample-group-summarize layer."""

    def __init__(self, name: str, cin: int, width: int, npoint: int, radius: float,
                 nsample: int, density_reweight: bool, rng, dtype):
        self.npoint = npoint
        self.radius = radius
        self.nsample = nsample
        self.density_reweight = density_reweight
        self.dtype = dtype
        self.conv1 = Conv1x1(f"{name}.conv1", cin + 3, width, rng, dtype)
        self.conv2 = Conv1x1(f"{name}.conv2", width, width, rng, dtype)

    def compute_geometry(self, coords: np.ndarray):
        """Centers, neighbor indices, relative coordinates, density scales."""
        centers = farthest_point_sampling(coords, self.npoint)
        idx = ball_group(coords, coords[centers], self.radius, self.nsample)  # (m, ns)
        rel = coords[idx] - coords[centers][:, None, :]
        rel_t = ad.Tensor(rel.reshape(-1, 3).astype(self.dtype))
        scale = None
        if self.density_reweight:
            s = _inverse_density_scale(coords, idx, self.radius / 2)
            scale = ad.Tensor(s.reshape(-1, 1).astype(self.dtype))
        return coords[centers], idx, rel_t, scale

    def apply(self, feats: ad.Tensor, idx: np.ndarray, rel: ad.Tensor,
              scale: ad.Tensor | None) -> ad.Tensor:
        grouped = ad.gather_rows(feats, idx.ravel())  # (m*ns, C)
        h = ad.concat(rel, grouped)
        if scale is not None:
            h = ad.mul(h, scale)
        h = self.conv2(self.conv1(h))
        return ad.rowmax_pool(h, self.nsample)

    def __call__(self, feats: ad.Tensor, coords: np.ndarray) -> tuple[ad.Tensor, np.ndarray]:
        center_coords, idx, rel, scale = self.compute_geometry(coords)
        return self.apply(feats, idx, rel, scale), center_coords

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()


class FeaturePropagation:
    """Interpolate coarse features up to a fine level, concat skips, and map."""

    def __init__(self, name: str, cin: int, width: int, rng, dtype, eps: float = 1e-8):
        self.eps = eps
        self.dtype = dtype
        self.conv = Conv1x1(f"{name}.conv", cin, width, rng, dtype)

    def apply(self, coarse_feats: ad.Tensor, interp: ad.Tensor,
              skip_feats: ad.Tensor | None) -> ad.Tensor:
        up = ad.matmul(interp, coarse_feats)
        h = ad.concat(skip_feats, up) if skip_feats is not None else up
        return self.conv(h)

    def __call__(self, coarse_feats: ad.Tensor, coarse_coords: np.ndarray,
                 fine_coords: np.ndarray, skip_feats: ad.Tensor | None) -> ad.Tensor:
        mat = interpolation_matrix(fine_coords, coarse_coords, eps=self.eps)
        return self.apply(coarse_feats, ad.Tensor(mat.astype(self.dtype)), skip_feats)

    def parameters(self):
        return self.conv.parameters()


class Encoder:
    def __init__(self, spec: LayerSpec, rng, dtype):
        cins = (spec.in_channels,) + spec.widths[:2]
        self.layers = [
            SetAbstraction(f"encoder.sa{i+1}", cins[i], spec.widths[i], spec.npoints[i],
                           spec.radii[i], spec.nsamples[i], spec.density_reweight, rng, dtype)
            for i in range(3)
        ]
        self.head = Conv1x1("encoder.head", spec.widths[2], spec.encoder_width, rng, dtype)

    def apply(self, feats: ad.Tensor, geo: BlockGeometry):
        """Returns the coarse (N_e, 512) features plus per-level skip features."""
        skips = [feats]
        h = feats
        for layer, idx, rel, scale in zip(self.layers, geo.sa_indices, geo.sa_rel, geo.sa_scale):
            h = layer.apply(h, idx, rel, scale)
            skips.append(h)
        return self.head(h), skips

    def parameters(self):
        return collect_parameters(self.layers) + self.head.parameters()


class Decoder:
    """Three upsampling layers from the coarse level back to full resolution."""

    def __init__(self, name: str, spec: LayerSpec, rng, dtype):
        w_c, w_b, w_a = spec.decoder_widths
        self.fp_coarse = FeaturePropagation(f"{name}.fp_coarse",
                                            spec.encoder_width + spec.widths[1], w_c, rng, dtype)
        self.fp_mid = FeaturePropagation(f"{name}.fp_mid", w_c + spec.widths[0], w_b, rng, dtype)
        self.fp_full = FeaturePropagation(f"{name}.fp_full", w_b + spec.in_channels, w_a, rng, dtype)

    def apply(self, encoded: ad.Tensor, skips, geo: BlockGeometry) -> DecoderFeatures:
        # skips: [input, sa1, sa2, sa3]; geo.levels: [a, b, c, e]
        f_c = self.fp_coarse.apply(encoded, geo.fp_mats[0], skips[2])
        f_b = self.fp_mid.apply(f_c, geo.fp_mats[1], skips[1])
        f_a = self.fp_full.apply(f_b, geo.fp_mats[2], skips[0])
        return DecoderFeatures(full=f_a, mid=f_b, coarse=f_c,
                               coords_full=geo.levels[0], coords_mid=geo.levels[1],
                               coords_coarse=geo.levels[2])

    def parameters(self):
        return collect_parameters([self.fp_coarse, self.fp_mid, self.fp_full])


class Backbone:
    """Shared encoder feeding independently parameterized semantic and
    instance decoders."""

    def __init__(self, spec: LayerSpec, rng, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.encoder = Encoder(spec, rng, dtype)
        self.semantic_decoder = Decoder("semantic_decoder", spec, rng, dtype)
        self.instance_decoder = Decoder("instance_decoder", spec, rng, dtype)

    def compute_geometry(self, coords: np.ndarray) -> BlockGeometry:
        coords = np.asarray(coords, dtype=np.float64)
        levels = [coords]
        sa_indices, sa_rel, sa_scale = [], [], []
        cur = coords
        for layer in self.encoder.layers:
            centers, idx, rel, scale = layer.compute_geometry(cur)
            sa_indices.append(idx)
            sa_rel.append(rel)
            sa_scale.append(scale)
            levels.append(centers)
            cur = centers

        def mat(fine, coarse):
            return ad.Tensor(interpolation_matrix(levels[fine], levels[coarse]).astype(self.dtype))

        return BlockGeometry(
            levels=levels, sa_indices=sa_indices, sa_rel=sa_rel, sa_scale=sa_scale,
            fp_mats=[mat(2, 3), mat(1, 2), mat(0, 1)],
            fusion_mid=mat(0, 1), fusion_coarse=mat(0, 2),
        )

    def apply(self, feats: ad.Tensor, geo: BlockGeometry) -> tuple[DecoderFeatures, DecoderFeatures]:
        encoded, skips = self.encoder.apply(feats, geo)
        return self.semantic_decoder.apply(encoded, skips, geo), \
            self.instance_decoder.apply(encoded, skips, geo)

    def __call__(self, feats: ad.Tensor, coords: np.ndarray):
        return self.apply(feats, self.compute_geometry(coords))

    def forward_features(self, block_features: np.ndarray, dtype=None,
                         geometry: BlockGeometry | None = None):
        """Convenience wrapper: (N, 9) block features in, the two decoder
        feature pyramids out. Coordinates are taken from columns 0-2."""
        feats = np.asarray(block_features)
        x = ad.Tensor(feats.astype(dtype or self.dtype))
        if geometry is None:
            geometry = self.compute_geometry(feats[:, :3])
        return (*self.apply(x, geometry), geometry)

    def parameters(self):
        return collect_parameters([self.encoder, self.semantic_decoder, self.instance_decoder])
