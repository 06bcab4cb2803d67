"""Finite-difference gradient audits for every differentiable op in the model.

Each named op wraps one forward path into a scalar function of a flat float64
input vector (activations, not parameters) and compares autograd against
central differences. The analytic gradient is always exact and computed over
every coordinate; finite differences run on a per-part selection of the
largest-magnitude coordinates, because a 64-bit central difference cannot
resolve gradients sitting below the cancellation noise of two forward passes.
Input parts whose analytic gradient vanishes everywhere are audited
separately: their finite differences must vanish too, which catches inputs a
buggy backward silently detached.

The `corrupt_backward` hook scales the incoming gradient of the op's inputs
while leaving values untouched; a checker that still passes with a corrupted
backward would be vacuous, and the test suite uses the hook to prove this one
is not.
"""

from __future__ import annotations

import numpy as np
import torch

from . import losses, synthworld
from .config import RunConfig
from .kinematics import dual_arm_chain
from .model import build_model, default_bin_spec
from .mvfusion import aggregate, lift, select_neighbors
from .numcore import Rng, grad_check, softmax

GRADCHECK_OPS = (
    "pair_fuse", "predict_depth_distribution", "lift", "cross_view_aggregate",
    "gated_residual", "fuse_geometry", "latent_block", "readout",
    "encode_state", "decode", "forward_kinematics", "loss_diff", "loss_fk",
    "loss_depth", "total_loss",
)

DEFAULT_TOL = 1e-4
_STEP = 1e-4          # central-difference step (64-bit); see _select_coords
_CAP_PER_PART = 32    # finite-difference coordinates per input part
_GRAD_FLOOR = 1e-6    # 64-bit FD resolves gradients down to ~1e-6 cleanly
_DEAD_FD_BOUND = 1e-6  # near-zero analytic parts must difference to ~zero too


class _ScaleGrad(torch.autograd.Function):
    """Identity forward; backward multiplies the gradient by `scale`."""

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def _flatten(tensors) -> torch.Tensor:
    return torch.cat([t.detach().reshape(-1) for t in tensors])


def _unflatten(vec: torch.Tensor, shapes, corrupt) -> list:
    out, off = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        t = vec[off:off + n].reshape(shape)
        if corrupt is not None:
            t = _ScaleGrad.apply(t, corrupt)
        out.append(t)
        off += n
    return out


class _Projector:
    """Fixed random projections turning op outputs into one scalar."""

    def __init__(self, rng: Rng):
        self.rng = rng
        self.cache = {}

    def __call__(self, *outputs) -> torch.Tensor:
        total = None
        for i, out in enumerate(outputs):
            key = (i, tuple(out.shape))
            if key not in self.cache:
                p = self.rng.torch_normal(tuple(out.shape), dtype=torch.float64)
                self.cache[key] = p / np.sqrt(out.numel())
            term = (out * self.cache[key]).sum()
            total = term if total is None else total + term
        return total


class Fixture:
    """Shared float64 model + synthetic activations for all op checks."""

    def __init__(self, cfg: RunConfig = None, seed: int = 0):
        self.cfg = cfg or RunConfig.tiny()
        self.rng = Rng(np.random.SeedSequence([seed, 0x9C40]))
        rig = synthworld.default_rig(self.cfg.camera)
        chain = dual_arm_chain()
        self.model = build_model(self.cfg, chain, rig).to_dtype(torch.float64)
        m, c = self.model, self.cfg

        # Zero-initialized parameters (ReZero gates, the upsample head's final
        # conv) leave whole computation paths without gradient at the exact
        # init point, which would make their checks vacuous; nudge every
        # all-zero parameter so the audit runs at a generic point.
        with torch.no_grad():
            for p in m.parameters():
                if p.numel() and float(p.abs().max()) == 0.0:
                    p.add_(0.05 * self.rng.torch_normal(tuple(p.shape),
                                                        torch.float64))

        views = len(c.ablation.views)
        n_tok = m.geometry.tokens_per_view
        d, d_dep = c.encoder.token_dim, c.encoder.depth_dim
        r = self.rng
        self.rgb_tok = 0.5 * r.torch_normal((1, views, n_tok, d), torch.float64)
        self.dep_tok = 0.5 * r.torch_normal((1, views, n_tok, d_dep),
                                            torch.float64)
        self.logits = r.torch_normal((1, views, n_tok, c.fusion.num_bins),
                                     torch.float64)

        with torch.no_grad():
            r_hat, d_hat = m.fusion.pair(self.rgb_tok, self.dep_tok)
            self.r_hat, self.d_hat = r_hat, d_hat
            probs = m.fusion.depth_head(r_hat, d_hat)
            anchors, _ = lift(probs, m.fusion.phi, m.geometry)
            det = anchors[0].to(torch.float32).numpy()
            self.neighbor_idx = torch.from_numpy(
                select_neighbors(det, c.fusion.knn_k))[None]

        # Image-space inputs: depths strictly inside the bin range so finite
        # differences never cross a validity or clamping edge.
        h, w = c.camera.height, c.camera.width
        self.rgb_img = r.torch_uniform(0.05, 0.95, (1, views, 3, h, w),
                                       torch.float64)
        depth_np = r.uniform(0.3, 1.0, size=(views, h, w)).astype(np.float64)
        self.depth_img = torch.from_numpy(depth_np)[None, :, None]
        tgt, omega = losses.depth_targets(
            depth_np.astype(np.float32), np.ones_like(depth_np, bool),
            default_bin_spec(c), [tuple(g) for g in m.geometry.grids],
            c.camera.strides, mode=c.loss.validity_mode,
            threshold=c.loss.valid_threshold)
        self.depth_tgt = torch.from_numpy(tgt).to(torch.float64)[None]
        self.depth_omega = torch.from_numpy(omega).to(torch.float64)[None]

        self.text_tokens, self.text_mask = m.embed_text(
            ["reach the red sphere with the left arm"])
        self.patches = m.readout.patch_embed(self.rgb_img).detach() \
            if m.use_language else None

        nj, horizon = chain.n_joints, c.decoder.horizon
        self.angles = 0.2 * r.torch_normal((1, horizon, nj), torch.float64)
        self.noise = r.torch_normal((1, horizon, nj), torch.float64)
        self.t = torch.tensor([400], dtype=torch.int64)
        self.state_angles = 0.2 * r.torch_normal((1, nj), torch.float64)

        with torch.no_grad():
            state = m.torch_chain.joint_state(self.state_angles)
            self.obs = m.observe(self.rgb_img, self.depth_img,
                                 self.text_tokens, self.text_mask, state,
                                 neighbor_idx=self.neighbor_idx)
            self.obs = {k: (v.detach() if isinstance(v, torch.Tensor) else v)
                        for k, v in self.obs.items()}
            self.noisy_state = m.torch_chain.joint_state(
                0.3 * r.torch_normal((1, horizon, nj), torch.float64))

        self.proj = _Projector(r.spawn())
        self.coord_rng = r.spawn()


def _op_point_and_fn(fx: Fixture, name: str, corrupt):
    """Returns (scalar_fn, input part tensors) for one named op."""
    m, proj = fx.model, fx.proj

    if name == "pair_fuse":
        shapes = [fx.rgb_tok.shape, fx.dep_tok.shape]

        def fn(vec):
            rgb, dep = _unflatten(vec, shapes, corrupt)
            r_hat, d_hat = m.fusion.pair(rgb, dep)
            return proj(r_hat, d_hat)
        return fn, [fx.rgb_tok, fx.dep_tok]

    if name == "predict_depth_distribution":
        shapes = [fx.r_hat.shape, fx.d_hat.shape]

        def fn(vec):
            r_hat, d_hat = _unflatten(vec, shapes, corrupt)
            return proj(m.fusion.depth_head(r_hat, d_hat))
        return fn, [fx.r_hat, fx.d_hat]

    if name == "lift":
        shapes = [fx.logits.shape]

        def fn(vec):
            (logits,) = _unflatten(vec, shapes, corrupt)
            anchors, embeds = lift(softmax(logits), m.fusion.phi, m.geometry)
            return proj(anchors, embeds)
        return fn, [fx.logits]

    if name == "cross_view_aggregate":
        tok, anc = fx.rgb_tok[0], fx.obs["anchors"][0]
        shapes = [tok.shape, anc.shape]

        def fn(vec):
            tokens, anchors = _unflatten(vec, shapes, corrupt)
            h = aggregate(tokens, anchors, fx.neighbor_idx[0],
                          m.cfg.fusion.tau)
            return proj(h)
        return fn, [tok, anc]

    if name == "gated_residual":
        h0 = 0.5 * fx.proj.rng.torch_normal(tuple(fx.rgb_tok.shape),
                                            torch.float64)
        gate = m.fusion.gate.detach().reshape(1)
        shapes = [fx.rgb_tok.shape, h0.shape, gate.shape]

        def fn(vec):
            t, h, g = _unflatten(vec, shapes, corrupt)
            return proj(t + g * h)
        return fn, [fx.rgb_tok, h0, gate]

    if name == "fuse_geometry":
        shapes = [fx.rgb_tok.shape, fx.dep_tok.shape]

        def fn(vec):
            rgb, dep = _unflatten(vec, shapes, corrupt)
            out = m.fusion.fuse_tokens(rgb, dep, m.geometry,
                                       neighbor_idx=fx.neighbor_idx)
            return proj(out["tokens"])
        return fn, [fx.rgb_tok, fx.dep_tok]

    if name == "latent_block":
        z0 = fx.text_tokens[:, None]                     # (1, 1, K, D)
        x0 = fx.patches[:, :1]                           # (1, 1, N_p, D)
        mask = fx.text_mask[:, None]
        shapes = [z0.shape, x0.shape]

        def fn(vec):
            z, x = _unflatten(vec, shapes, corrupt)
            return proj(m.readout.blocks[0](z, x, mask))
        return fn, [z0, x0]

    if name == "readout":
        shapes = [fx.text_tokens.shape, fx.patches.shape]

        def fn(vec):
            text, patches = _unflatten(vec, shapes, corrupt)
            return proj(m.readout(text, fx.text_mask, patches))
        return fn, [fx.text_tokens, fx.patches]

    if name == "encode_state":
        joint_state = m.torch_chain.joint_state(fx.state_angles).detach()
        shapes = [joint_state.shape]

        def fn(vec):
            (js,) = _unflatten(vec, shapes, corrupt)
            return proj(m.state_encoder(js, m.hop))
        return fn, [joint_state]

    if name == "decode":
        obs = fx.obs
        parts = [fx.noisy_state, obs["state_tokens"], obs["geom_tokens"],
                 obs["geom_anchors"], obs["context"]]
        shapes = [p.shape for p in parts]

        def fn(vec):
            noisy, state_tok, geom_tok, geom_anc, context = _unflatten(
                vec, shapes, corrupt)
            out = m.decoder(noisy, fx.t, state_tok, m.hop, geom_tok, geom_anc,
                            m.geom_pos, context)
            return proj(out)
        return fn, parts

    if name == "forward_kinematics":
        shapes = [fx.angles.shape]

        def fn(vec):
            (theta,) = _unflatten(vec, shapes, corrupt)
            p, q = m.torch_chain.fk(theta)
            return proj(p, q)
        return fn, [fx.angles]

    if name == "loss_diff":
        target = fx.noisy_state.detach()
        pred0 = target + 0.1 * fx.proj.rng.torch_normal(tuple(target.shape),
                                                        torch.float64)
        weights = losses.diff_weights(m.cfg.loss, torch.float64)
        shapes = [pred0.shape]

        def fn(vec):
            (pred,) = _unflatten(vec, shapes, corrupt)
            return losses.loss_diffusion(pred, target, weights)
        return fn, [pred0]

    if name == "loss_fk":
        target = fx.noisy_state.detach()
        pred0 = target + 0.1 * fx.proj.rng.torch_normal(tuple(target.shape),
                                                        torch.float64)
        weights = losses.fk_weights(m.cfg.loss, torch.float64)
        shapes = [pred0.shape]

        def fn(vec):
            (pred,) = _unflatten(vec, shapes, corrupt)
            return losses.loss_fk(m.torch_chain, pred, target, weights)
        return fn, [pred0]

    if name == "loss_depth":
        shapes = [fx.logits.shape]

        def fn(vec):
            (logits,) = _unflatten(vec, shapes, corrupt)
            return losses.loss_depth(softmax(logits), fx.depth_tgt,
                                     fx.depth_omega)
        return fn, [fx.logits]

    if name == "total_loss":
        shapes = [fx.rgb_img.shape, fx.depth_img.shape, fx.angles.shape]

        def fn(vec):
            rgb, depth, clean = _unflatten(vec, shapes, corrupt)
            state = m.torch_chain.joint_state(clean[:, 0])
            obs = m.observe(rgb, depth, fx.text_tokens, fx.text_mask, state,
                            neighbor_idx=fx.neighbor_idx)
            loss, _ = losses.total_loss(m, obs, clean, fx.t, fx.noise,
                                        fx.depth_tgt, fx.depth_omega)
            return loss
        return fn, [fx.rgb_img, fx.depth_img, fx.angles]

    raise ValueError(f"unknown gradcheck op {name!r}")


def _analytic_grad(fn, point: torch.Tensor) -> np.ndarray:
    x = point.clone().requires_grad_(True)
    value = fn(x)
    (g,) = torch.autograd.grad(value, x, allow_unused=True)
    if g is None:
        return np.zeros(point.numel())
    return g.detach().numpy()


def _select_coords(rng: Rng, analytic: np.ndarray, part_sizes,
                   cap_per_part: int = _CAP_PER_PART):
    """Pick finite-difference coordinates per input part.

    Central differences at 64-bit resolve a gradient only when it stands
    above the cancellation noise of two full forward passes, so each part is
    audited at its largest-magnitude coordinates. Parts whose analytic
    gradient is (near-)zero everywhere get a separate audit instead: their
    finite differences must also vanish, which catches inputs a buggy
    backward silently detached. Returns (coords, dead_coords).
    """
    coords, dead, off = [], [], 0
    for n in part_sizes:
        a = np.abs(analytic[off:off + n])
        amax = a.max() if n else 0.0
        floor = max(_GRAD_FLOOR, 0.01 * amax)
        strong = np.flatnonzero(a >= floor)
        if amax < _GRAD_FLOOR or strong.size == 0:
            k = min(8, n)
            dead.append(np.sort(rng.choice(n, size=k, replace=False)) + off)
        else:
            if strong.size > cap_per_part:
                top = np.argpartition(a[strong], strong.size - cap_per_part)
                strong = strong[top[strong.size - cap_per_part:]]
            coords.append(np.sort(strong) + off)
        off += n
    cat = lambda xs: (np.concatenate(xs) if xs
                      else np.array([], dtype=np.int64))
    return cat(coords), cat(dead)


def run_gradchecks(cfg: RunConfig = None, ops=None, seed: int = 0,
                   corrupt_backward: float = None, tol: float = DEFAULT_TOL,
                   step: float = _STEP) -> list:
    """Run the op suite; returns one row dict per op.

    corrupt_backward (e.g. 1.01) scales every checked op's input gradient to
    demonstrate the audit actually fails on a broken backward.
    """
    fx = Fixture(cfg, seed)
    rows = []
    for name in (ops or GRADCHECK_OPS):
        fn, parts = _op_point_and_fn(fx, name, corrupt_backward)
        point = _flatten(parts)
        analytic = _analytic_grad(fn, point)
        coords, dead_coords = _select_coords(fx.coord_rng, analytic,
                                             [p.numel() for p in parts])
        report = grad_check(fn, point, step=step, coords=coords)
        dead_ok = True
        if dead_coords.size:
            dead_rep = grad_check(fn, point, step=step, coords=dead_coords)
            dead_ok = (not dead_rep.failed_coords
                       and np.max(np.abs(dead_rep.numeric)) < _DEAD_FD_BOUND)
        rows.append({
            "op": name,
            "max_rel_err": report.max_rel_err,
            "checked_coords": len(report.coords),
            "dead_coords": int(dead_coords.size),
            "total_coords": point.numel(),
            "ok": bool(report.ok and report.max_rel_err < tol and dead_ok),
        })
    return rows
