"""Differentiable emission-absorption volume rendering.

Samples along each ray are composited with ``w_i = T_i (1 - exp(-sigma_i delta_i))``
where ``T_i = exp(-sum_{j<i} sigma_j delta_j)``. The last interval ends at
``t_far`` (not at infinity), so ``sum(w) + T_end == 1`` holds exactly and the
leftover transmittance lights the ray with the background color.
"""
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import UsageError
from .field import FieldSample
from .geometry import rays_for_view


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 32
    n_fine: int = 32
    stratified: bool = True

    def __post_init__(self):
        if self.n_coarse < 1:
            raise UsageError("n_coarse must be >= 1")
        if self.n_fine < 0:
            raise UsageError("n_fine must be >= 0")


@dataclass
class RenderResult:
    color: dc.Tensor          # (n, 3)
    beta: dc.Tensor           # (n,)
    depth: dc.Tensor          # (n,)
    weights: dc.Tensor        # (n, s)
    t_end: dc.Tensor          # (n,)
    t_values: np.ndarray      # (n, s)

    def __len__(self):
        return len(self.t_values)


def stratified_samples(n_rays, t_near, t_far, n, stratified=True, rng=None):
    """One t-value per equal-width bin of [t_near, t_far]: a uniform draw or the midpoint."""
    edges = np.linspace(t_near, t_far, n + 1)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    if stratified:
        if rng is None:
            raise UsageError("stratified sampling needs an rng")
        u = rng.random((n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    t = lo + u * width
    # keep every draw inside its half-open bin
    return np.minimum(t, np.nextafter(edges[1:], -np.inf))


def _enforce_increasing(t):
    for j in range(1, t.shape[1]):
        t[:, j] = np.maximum(t[:, j], np.nextafter(t[:, j - 1], np.inf))
    return t


def importance_resample(t_values, weights, n_fine, t_near, t_far, rng=None):
    """Draw ``n_fine`` extra t-values from the piecewise-constant weight density.

    Sample ``i`` owns the bin between the midpoints to its neighbours (the
    outer bins end at ``t_near`` / ``t_far``). Rays whose weights are all zero
    fall back to a uniform density. Returns the sorted union with the input
    t-values; ties are nudged apart by one ulp so the result is strictly
    increasing. With ``rng=None`` the inverse CDF is read at evenly spaced
    quantiles.
    """
    t_values = np.asarray(t_values, dtype=float)
    if n_fine == 0:
        return t_values.copy()
    fine = importance_samples(t_values, weights, n_fine, t_near, t_far, rng)
    return merge_samples(t_values, fine)[0]


def merge_samples(t_coarse, t_fine):
    """Sorted union of two sample sets and the permutation that produced it."""
    both = np.concatenate([t_coarse, t_fine], axis=1)
    order = np.argsort(both, axis=1, kind="stable")
    merged = np.take_along_axis(both, order, axis=1)
    return _enforce_increasing(merged), order


def importance_samples(t_values, weights, n_fine, t_near, t_far, rng=None):
    """The ``n_fine`` new draws of :func:`importance_resample`, unsorted and unmerged."""
    t_values = np.asarray(t_values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise UsageError("importance_resample: negative weights")
    n_rays, s = t_values.shape
    mids = 0.5 * (t_values[:, 1:] + t_values[:, :-1])
    edges = np.concatenate([np.full((n_rays, 1), t_near), mids, np.full((n_rays, 1), t_far)], axis=1)

    total = w.sum(axis=1, keepdims=True)
    dead = total[:, 0] <= 0
    if np.any(dead):
        w = w.copy()
        w[dead] = 1.0
        total = w.sum(axis=1, keepdims=True)
    pdf = w / total
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine)).copy()
    else:
        u = rng.random((n_rays, n_fine))

    # row-wise searchsorted by offsetting each row into its own interval
    offs = 2.0 * np.arange(n_rays)[:, None]
    idx = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(n_rays, n_fine)
    idx = idx - 1 - (s + 1) * np.arange(n_rays)[:, None]
    idx = np.clip(idx, 0, s - 1)
    rows = np.arange(n_rays)[:, None]
    c0 = cdf[rows, idx]
    p = pdf[rows, idx]
    frac = np.where(p > 0, (u - c0) / np.where(p > 0, p, 1.0), 0.5)
    frac = np.clip(frac, 0.0, 1.0)
    e0 = edges[rows, idx]
    e1 = edges[rows, idx + 1]
    fine = e0 + frac * (e1 - e0)
    return np.clip(fine, t_near, np.nextafter(t_far, -np.inf))


def _deltas(t_values, t_far):
    t_values = np.asarray(t_values, dtype=float)
    if t_values.ndim != 2 or t_values.shape[1] < 1:
        raise UsageError("t-values must have shape (n_rays, n_samples) with n_samples >= 1")
    if np.any(np.diff(t_values, axis=1) <= 0):
        raise UsageError("t-values must be strictly increasing along each ray")
    if np.any(t_values[:, -1] > t_far):
        raise UsageError("t-values must not exceed t_far")
    return np.concatenate([np.diff(t_values, axis=1), t_far - t_values[:, -1:]], axis=1)


def compositing_weights(density, t_values, t_far):
    """Return ``(weights, transmittance, t_end)`` for densities of shape (n, s)."""
    delta = _deltas(t_values, t_far)
    density = dc.as_tensor(density)
    depth_opt = dc.mul(density, delta.astype(density.dtype))
    before = dc.exclusive_cumsum(depth_opt)
    trans = dc.exp(dc.scale_add(before, alpha=-1.0))
    alpha = dc.scale_add(dc.exp(dc.scale_add(depth_opt, alpha=-1.0)), 1.0, alpha=-1.0, beta=1.0)
    weights = dc.mul(trans, alpha)
    # total optical depth from the same running sum, so T_end <= T_N holds exactly
    total = dc.add(dc.getitem(before, (slice(None), -1)), dc.getitem(depth_opt, (slice(None), -1)))
    t_end = dc.exp(dc.scale_add(total, alpha=-1.0))
    return weights, trans, t_end


def composite_color(colors, weights, t_end=None, background=None):
    """``sum_i w_i c_i`` (+ ``T_end * background``). ``colors`` has shape (n, s, 3)."""
    out = dc.sum(dc.mul(dc.expand(weights, -1), colors), axis=1)
    if background is not None and np.any(np.asarray(background) != 0):
        bg = np.asarray(background, dtype=out.dtype).reshape(1, 3)
        out = dc.add(out, dc.mul(dc.expand(t_end, -1), bg))
    return out


def composite_uncertainty(raw_beta, weights, beta_min):
    """``sum_i w_i softplus(beta_i - 1) + beta_min``."""
    shifted = dc.softplus(dc.scale_add(raw_beta, 1.0, alpha=1.0, beta=-1.0))
    return dc.scale_add(dc.sum(dc.mul(weights, shifted), axis=1), beta_min)


def composite_depth(weights, t_values):
    return dc.sum(dc.mul(weights, np.asarray(t_values, dtype=weights.dtype)), axis=1)


def composite(sample, t_values, t_far, beta_min=0.01, background=None):
    """Composite a :class:`FieldSample` evaluated on ``t_values`` (n, s)."""
    n, s = t_values.shape
    density = dc.reshape(sample.density, (n, s))
    weights, _, t_end = compositing_weights(density, t_values, t_far)
    color = composite_color(dc.reshape(sample.color, (n, s, 3)), weights, t_end, background)
    beta = composite_uncertainty(dc.reshape(sample.raw_beta, (n, s)), weights, beta_min)
    depth = composite_depth(weights, t_values)
    return RenderResult(color, beta, depth, weights, t_end, t_values)


def query_along(model, rays, t_values):
    pts = rays.origins[:, None, :] + t_values[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape)
    return model.query(pts.reshape(-1, 3), dirs.reshape(-1, 3))


def render_rays(model, rays, cfg, rng=None, beta_min=0.01, background=None, t_values=None, fine_draws=None):
    """Coarse pass, hierarchical resampling, fine pass.

    Returns ``(coarse, fine)``. Passing ``t_values`` skips sampling and renders
    a single pass on the given samples (returned as both results). Passing
    ``fine_draws`` (n, n_fine) uses them instead of resampling. Sample
    positions are never differentiated, so gradient checks hold them fixed
    with one of these two arguments.
    """
    if t_values is not None:
        res = composite(query_along(model, rays, t_values), t_values, rays.t_far, beta_min, background)
        return res, res
    tc = stratified_samples(len(rays), rays.t_near, rays.t_far, cfg.n_coarse, cfg.stratified, rng)
    coarse_sample = query_along(model, rays, tc)
    coarse = composite(coarse_sample, tc, rays.t_far, beta_min, background)
    if cfg.n_fine == 0:
        return coarse, coarse
    # the fine pass uses the same network, so coarse evaluations are reused
    # and only the new draws are queried
    if fine_draws is not None:
        new_t = np.asarray(fine_draws, dtype=float).reshape(len(rays), cfg.n_fine)
    else:
        new_t = importance_samples(tc, coarse.weights.values, cfg.n_fine, rays.t_near, rays.t_far,
                                   rng if cfg.stratified else None)
    tf, order = merge_samples(tc, new_t)
    extra = query_along(model, rays, new_t)
    merged = _merge_fields(coarse_sample, extra, order)
    fine = composite(merged, tf, rays.t_far, beta_min, background)
    return coarse, fine


def _merge_fields(a, b, order):
    n, s = order.shape

    def join(x, y, width=None):
        shape = (n, -1) if width is None else (n, -1, width)
        both = dc.concat([dc.reshape(x, shape), dc.reshape(y, shape)], axis=1)
        idx = order if width is None else np.repeat(order[..., None], width, axis=2)
        flat = (n * s,) if width is None else (n * s, width)
        return dc.reshape(dc.take(both, idx, axis=1), flat)

    return FieldSample(join(a.color, b.color, 3), join(a.density, b.density), join(a.raw_beta, b.raw_beta))


def render_rays_nograd(model, rays, cfg, rng=None, beta_min=0.01, background=None, chunk=2048):
    """Fine-pass color, uncertainty, depth and T_end as plain arrays, in chunks."""
    colors, betas, depths, t_ends = [], [], [], []
    with dc.no_grad():
        for start in range(0, len(rays), chunk):
            sub = rays.subset(slice(start, start + chunk))
            _, fine = render_rays(model, sub, cfg, rng, beta_min, background)
            colors.append(fine.color.values)
            betas.append(fine.beta.values)
            depths.append(fine.depth.values)
            t_ends.append(fine.t_end.values)
    return (np.concatenate(colors), np.concatenate(betas), np.concatenate(depths), np.concatenate(t_ends))


def render_view(model, pose, K, cfg, t_near, t_far, pixels=None, rng=None, beta_min=0.01,
                background=None, chunk=2048):
    """Render a view without recording gradients.

    Returns ``(color, beta, depth, t_end)``; with ``pixels=None`` the color is
    an (H, W, 3) image and the others (H, W) maps.
    """
    rays = rays_for_view(pose, K, pixels, t_near, t_far)
    color, beta, depth, t_end = render_rays_nograd(model, rays, cfg, rng, beta_min, background, chunk)
    if pixels is None:
        h, w = K.height, K.width
        return color.reshape(h, w, 3), beta.reshape(h, w), depth.reshape(h, w), t_end.reshape(h, w)
    return color, beta, depth, t_end
