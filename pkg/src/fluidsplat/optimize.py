"""Staged joint optimization: visual warmup, then visual + physics descent.

Phase one minimizes the image loss only; phase two adds the weighted
physics objective, whose gradient is refreshed every `phys_every`
iterations and reused in between. Updates are Adam per parameter group
with quaternion renormalization after each step. Runs are deterministic
given the config and seed (single-threaded reductions everywhere), except
for the wall-time column of the log.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adjoint, splat
from .errors import FluidSplatError
from .objectives import reg_loss
from .scene import GaussianSet, GradBuffer, save_gaussians
from .scenarios import Scenario, TrainConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

LOG_COLUMNS = ("iter", "phase", "camera", "loss_vis", "loss_phys", "loss_reg",
               "loss_total", "ssim", "grad_means", "grad_rotations",
               "grad_log_scales", "grad_opacity", "grad_sh", "wall_time")


class Adam:
    """Per-group Adam with the 3DGS-style tiny epsilon."""

    def __init__(self, gset: GaussianSet, config: TrainConfig):
        self.lrs = {"means": config.lr_means, "rotations": config.lr_rotations,
                    "log_scales": config.lr_log_scales,
                    "opacity_logits": config.lr_opacity, "sh": config.lr_sh}
        self.m = {k: np.zeros_like(v) for k, v in self._params(gset).items()}
        self.v = {k: np.zeros_like(v) for k, v in self._params(gset).items()}
        self.t = 0

    @staticmethod
    def _params(gset: GaussianSet):
        return {"means": gset.means, "rotations": gset.rotations,
                "log_scales": gset.log_scales,
                "opacity_logits": gset.opacity_logits, "sh": gset.sh_coeffs}

    def step(self, gset: GaussianSet, grads: GradBuffer):
        self.t += 1
        b1c = 1.0 - ADAM_BETA1 ** self.t
        b2c = 1.0 - ADAM_BETA2 ** self.t
        gdict = grads.groups()
        for name, p in self._params(gset).items():
            g = gdict[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p -= self.lrs[name] * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append({c: kw.get(c) for c in LOG_COLUMNS})

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(LOG_COLUMNS) + "\n")
            for r in self.rows:
                f.write(",".join(_fmt(r[c]) for c in LOG_COLUMNS) + "\n")

    def content_rows(self):
        """Rows without the wall-time column (the reproducible payload)."""
        cols = [c for c in LOG_COLUMNS if c != "wall_time"]
        return [tuple(_fmt(r[c]) for c in cols) for r in self.rows]

    def column(self, name):
        return [r[name] for r in self.rows]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


class _CameraSampler:
    """Shuffled epochs over the training views, seeded."""

    def __init__(self, indices, seed):
        self.indices = list(indices)
        self.rng = np.random.default_rng(seed)
        self.queue = []

    def next(self) -> int:
        if not self.queue:
            perm = self.rng.permutation(len(self.indices))
            self.queue = [self.indices[i] for i in perm]
        return self.queue.pop(0)


def evaluate_ssim(gset: GaussianSet, scenario: Scenario, indices) -> float:
    """Mean SSIM of renders against targets over the given view indices."""
    from .ssim import ssim
    vals = [ssim(splat.render(gset, scenario.cameras[i]).rgb, scenario.images[i])
            for i in indices]
    return float(np.mean(vals)) if vals else float("nan")


def physics_eval(gset: GaussianSet, scenario: Scenario, config: TrainConfig,
                 want_grad: bool = True):
    """One physics objective evaluation on the scenario's rollout."""
    return adjoint.simulate_objective(
        gset, scenario.fluid0(), scenario.rigid0(), scenario.spec, scenario.params,
        scenario.objective, config.horizon, scenario.mode, scenario.f_ext,
        scenario.x_ref, scenario.config.tile, scenario.config.kappa,
        config.stride, want_grad=want_grad)


def train(scenario: Scenario, config: TrainConfig | None = None,
          out_dir=None, quiet: bool = True):
    """Run the staged optimization; returns (final GaussianSet, TrainLog)."""
    config = config or scenario.config.train
    gset = scenario.initial_set.copy()
    sampler = _CameraSampler(scenario.train_idx, config.seed)
    opt = Adam(gset, config)
    log = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    total = config.iters_vis + config.iters_joint
    phys_cache = None  # (value, GradBuffer) reused between refreshes
    t_start = time.time()
    for it in range(total):
        joint = it >= config.iters_vis
        phase = "joint" if joint else "vis"
        cam_idx = sampler.next()
        try:
            target, tape = splat.render_with_tape(gset, scenario.cameras[cam_idx])
            lvis, g_img, parts = splat.visual_loss(target, scenario.images[cam_idx])
            grads = GradBuffer.zeros_like(gset)
            splat.render_backward(tape, gset, scenario.cameras[cam_idx], g_img, grads)
            lreg = reg_loss(gset, config.s_max, config.w_scale, config.w_opacity, grads)
            lphys = 0.0
            if joint and config.lambda_phys > 0.0:
                if phys_cache is None or (it - config.iters_vis) % config.phys_every == 0:
                    val, pgrads, _, _ = physics_eval(gset, scenario, config)
                    phys_cache = (val, pgrads)
                lphys, pgrads = phys_cache
                w = config.lambda_phys
                grads.means += w * pgrads.means
                grads.rotations += w * pgrads.rotations
                grads.log_scales += w * pgrads.log_scales
                grads.opacity_logits += w * pgrads.opacity_logits
                grads.sh_coeffs += w * pgrads.sh_coeffs
            if not grads.all_finite():
                raise FluidSplatError(f"non-finite gradient at iteration {it}")
            opt.step(gset, grads)
            gset.renormalize_rotations()
            if not all(np.all(np.isfinite(a)) for a in
                       (gset.means, gset.log_scales, gset.opacity_logits,
                        gset.rotations, gset.sh_coeffs)):
                raise FluidSplatError(f"non-finite parameter at iteration {it}")
        except FluidSplatError as e:
            if out_dir is not None:
                save_gaussians(gset, out_dir / f"failed_iter_{it:06d}.ply")
                log.write_csv(out_dir / "train_log.csv")
            raise FluidSplatError(f"training failed at iteration {it}: {e}") from e
        norms = grads.norms()
        log.add(iter=it, phase=phase, camera=cam_idx, loss_vis=lvis, loss_phys=lphys,
                loss_reg=lreg, loss_total=lvis + config.lambda_phys * lphys + lreg,
                ssim=parts["ssim"], grad_means=norms["means"],
                grad_rotations=norms["rotations"], grad_log_scales=norms["log_scales"],
                grad_opacity=norms["opacity_logits"], grad_sh=norms["sh"],
                wall_time=time.time() - t_start)
        if out_dir is not None and config.checkpoint_every > 0 \
                and (it + 1) % config.checkpoint_every == 0:
            save_gaussians(gset, out_dir / f"checkpoint_{it + 1:06d}.ply")
            log.write_csv(out_dir / "train_log.csv")
        if not quiet and (it % 50 == 0 or it == total - 1):
            print(f"  iter {it:5d} [{phase}] L_vis {lvis:.5f} L_phys {lphys:+.5f}")
    if out_dir is not None:
        save_gaussians(gset, out_dir / "final.ply")
        log.write_csv(out_dir / "train_log.csv")
    return gset, log


@dataclass
class SweepRow:
    lambda_phys: float
    final_ssim: float
    neg_phys: float
    error: str | None = None


def sweep(scenario: Scenario, config: TrainConfig, lambdas, out_dir=None,
          quiet: bool = True) -> list:
    """Independent train runs per physics weight with a fixed seed.

    Rows report held-out SSIM and the physics objective value (negated
    loss, higher is better) of each final model. Per-lambda failures are
    recorded in the row and do not abort the sweep.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise FluidSplatError("sweep needs at least one lambda")
    rows = []
    for lam in lambdas:
        import dataclasses as _dc
        cfg = _dc.replace(config, lambda_phys=float(lam))
        sub = None
        if out_dir is not None:
            sub = Path(out_dir) / f"lambda_{lam:g}"
        try:
            gset, _log = train(scenario, cfg, out_dir=sub, quiet=quiet)
            ssim_val = evaluate_ssim(gset, scenario, scenario.holdout_idx)
            val, _, _, _ = physics_eval(gset, scenario, cfg, want_grad=False)
            rows.append(SweepRow(float(lam), ssim_val, -val))
        except FluidSplatError as e:
            rows.append(SweepRow(float(lam), float("nan"), float("nan"), str(e)))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w") as f:
        f.write("lambda_phys,final_ssim,neg_phys,error\n")
        for r in rows:
            err = (r.error or "").replace(",", ";").replace("\n", " ")
            f.write(f"{r.lambda_phys:.17g},{r.final_ssim:.17g},{r.neg_phys:.17g},{err}\n")
