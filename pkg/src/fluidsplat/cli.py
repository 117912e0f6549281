"""Command-line surface: scenario generation, simulation, training, checks.

Every run writes its outputs plus a RunManifest (resolved config, seed,
tool version, file inventory with checksums) into one output directory, so
a run is reproducible from the manifest alone. Exit codes: 0 success,
1 usage error, 2 numerical failure, 3 gradcheck threshold failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, adjoint, fields, fluid, optimize, report, splat
from .errors import FluidSplatError, UsageError
from .objectives import dye_mass_split
from .occupancy import tiled_mask
from .rigid import coupled_step, reaction_wrench
from .scene import GradBuffer, load_gaussians, save_gaussians
from .scenarios import Scenario, ScenarioConfig, gen_scenario, save_png, write_bundle

GRADCHECK_GATE = 1e-2


# ---------------------------------------------------------------------------
# Config overrides
# ---------------------------------------------------------------------------

def _valid_paths(d, prefix=""):
    out = []
    for k, v in d.items():
        p = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_valid_paths(v, p + "."))
        else:
            out.append(p)
    return out


def apply_overrides(config: ScenarioConfig, overrides) -> ScenarioConfig:
    """Apply --dot.path=value overrides onto the config dictionary."""
    d = config.to_dict()
    valid = _valid_paths(d)
    for key, raw in overrides:
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise UsageError(f"unknown config flag --{key}; valid dot-paths:\n  "
                                 + "\n  ".join(sorted(valid)))
            node = node[p]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise UsageError(f"unknown config flag --{key}; valid dot-paths:\n  "
                             + "\n  ".join(sorted(valid)))
        try:
            node[leaf] = json.loads(raw)
        except json.JSONDecodeError:
            node[leaf] = raw
    return ScenarioConfig.from_dict(d)


def _split_args(argv):
    """Separate --dot.path=value overrides from ordinary arguments."""
    plain, overrides = [], []
    for a in argv:
        if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]:
            key, val = a[2:].split("=", 1)
            overrides.append((key, val))
        else:
            plain.append(a)
    return plain, overrides


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

class RunContext:
    def __init__(self, command, config: ScenarioConfig, out_dir: Path, argv):
        self.command = command
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.argv = list(argv)
        self.outputs = []

    def track(self, path) -> Path:
        p = Path(path)
        if p not in self.outputs:
            self.outputs.append(p)
        return p

    def track_tree(self, paths):
        for p in paths:
            self.track(p)

    def finish(self, status: str, error: str | None = None) -> Path:
        inventory = []
        for p in self.outputs:
            if p.exists():
                data = p.read_bytes()
                inventory.append({"path": str(p.relative_to(self.out_dir)),
                                  "sha256": hashlib.sha256(data).hexdigest(),
                                  "bytes": len(data)})
            else:
                inventory.append({"path": str(p), "missing": True})
        manifest = {
            "tool": "fluidsplat", "version": __version__,
            "command": self.command, "argv": self.argv,
            "seed": self.config.seed, "status": status,
            "error": error, "config": self.config.to_dict(),
            "outputs": inventory,
        }
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1))
        return path


def _out_dir(args, config: ScenarioConfig, command: str) -> Path:
    base = Path(args.out) if args.out else Path("runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return base / f"{config.name}_{command}_{stamp}_s{config.seed}"


def _load_config(args, overrides) -> ScenarioConfig:
    if args.config:
        config = ScenarioConfig.load(args.config)
    else:
        config = ScenarioConfig()
    if overrides:
        config = apply_overrides(config, overrides)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _gaussian_source(args, scen: Scenario):
    if getattr(args, "gaussians", None):
        return load_gaussians(args.gaussians)
    return scen.ground_truth


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_render(args, overrides) -> int:
    config = _load_config(args, overrides)
    scen = gen_scenario(config)
    ctx = RunContext("render", config, _out_dir(args, config, "render"), sys.argv[1:])
    gset = _gaussian_source(args, scen)
    views = ctx.out_dir / "renders"
    views.mkdir(exist_ok=True)
    for i, cam in enumerate(scen.cameras):
        img = splat.render(gset, cam).rgb
        ctx.track(views / f"render_{i:03d}.png")
        save_png(img, views / f"render_{i:03d}.png")
    ctx.track_tree(write_bundle(scen, ctx.out_dir / "bundle"))
    ctx.finish("success")
    print(f"rendered {len(scen.cameras)} views -> {ctx.out_dir}")
    return 0


def cmd_mask(args, overrides) -> int:
    config = _load_config(args, overrides)
    scen = gen_scenario(config)
    ctx = RunContext("mask", config, _out_dir(args, config, "mask"), sys.argv[1:])
    gset = _gaussian_source(args, scen)
    grid = tiled_mask(gset, scen.spec, config.tile, config.kappa)
    raw = fields.save_field(grid.chi, scen.spec, "chi", ctx.out_dir / "chi")
    ctx.track(raw)
    ctx.track(ctx.out_dir / "chi.json")
    mid = grid.chi[:, grid.chi.shape[1] // 2, :]
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(mid.T, origin="lower", cmap="magma", vmin=0, vmax=1)
    fig.colorbar(im, ax=ax, label="chi")
    ax.set_title("solid mask midplane (y slice)")
    fig.tight_layout()
    fig.savefig(ctx.track(ctx.out_dir / "chi_midplane.png"), dpi=110)
    plt.close(fig)
    ctx.finish("success")
    print(f"mask range [{grid.chi.min():.4f}, {grid.chi.max():.4f}] -> {ctx.out_dir}")
    return 0


def cmd_simulate(args, overrides) -> int:
    config = _load_config(args, overrides)
    scen = gen_scenario(config)
    ctx = RunContext("simulate", config, _out_dir(args, config, "simulate"), sys.argv[1:])
    gset = _gaussian_source(args, scen)
    horizon = config.train.horizon
    spec, params = scen.spec, scen.params
    fstate = scen.fluid0()
    rstate = scen.rigid0()
    diag_rows = []
    rigid_rows = []
    dye_rows = []
    try:
        for t in range(horizon):
            fstate_next, rstate_next, aux = coupled_step(
                fstate, rstate, gset, params, spec, scen.mode, scen.f_ext,
                scen.x_ref, config.tile, config.kappa, warm_start=fstate.p,
                want_aux=True)
            d = fluid.diagnostics(fstate_next, spec, params)
            diag_rows.append((t + 1, d["div_max_interior"], d["dye_mass"],
                              d["kinetic_energy"]))
            w = aux.wrench
            rigid_rows.append((t + 1, *rstate_next.x, *rstate_next.v, *rstate_next.q,
                               *rstate_next.L, *w.f, *w.tau0))
            if config.dye.region is not None or scen.objective.region is not None:
                region = scen.objective.region or config.dye.region
                inside, outside = dye_mass_split(fstate_next.rho, spec, region)
                dye_rows.append((t + 1, inside, outside))
            fstate, rstate = fstate_next, rstate_next
    except FluidSplatError as e:
        ctx.finish("failed", str(e))
        print(f"error: {e}", file=sys.stderr)
        return 2
    with open(ctx.track(ctx.out_dir / "diagnostics.csv"), "w") as f:
        f.write("t,div_max_interior,dye_mass,kinetic_energy\n")
        for row in diag_rows:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(ctx.track(ctx.out_dir / "rigid_trajectory.csv"), "w") as f:
        f.write("t,x,y,z,vx,vy,vz,qw,qx,qy,qz,Lx,Ly,Lz,fx,fy,fz,taux,tauy,tauz\n")
        for row in rigid_rows:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")
    if dye_rows:
        with open(ctx.track(ctx.out_dir / "dye_mass.csv"), "w") as f:
            f.write("t,mass_in_region,mass_outside\n")
            for row in dye_rows:
                f.write(",".join(f"{v:.17g}" for v in row) + "\n")
    for name, arr in (("rho_final", fstate.rho), ("p_final", fstate.p),
                      ("ux_final", fstate.u[0]), ("uz_final", fstate.u[2])):
        fields.save_field(arr, spec, name, ctx.out_dir / name)
        ctx.track(ctx.out_dir / f"{name}.raw")
        ctx.track(ctx.out_dir / f"{name}.json")
    times = [r[0] for r in diag_rows]
    report.save_simulation_figure(
        times,
        [r[1] for r in dye_rows] if dye_rows else None,
        [r[2] for r in dye_rows] if dye_rows else None,
        [r[3] for r in rigid_rows] if scen.mode != "static" else None,
        ctx.track(ctx.out_dir / "simulation.png"))
    ctx.finish("success")
    print(f"simulated {horizon} steps -> {ctx.out_dir}")
    return 0


def cmd_optimize(args, overrides) -> int:
    config = _load_config(args, overrides)
    scen = gen_scenario(config)
    ctx = RunContext("optimize", config, _out_dir(args, config, "optimize"), sys.argv[1:])
    try:
        gset, log = optimize.train(scen, config.train, out_dir=ctx.out_dir,
                                   quiet=args.quiet)
    except FluidSplatError as e:
        for p in sorted(ctx.out_dir.glob("*.ply")) + sorted(ctx.out_dir.glob("*.csv")):
            ctx.track(p)
        ctx.finish("failed", str(e))
        print(f"error: {e}", file=sys.stderr)
        return 2
    for p in sorted(ctx.out_dir.glob("*.ply")) + sorted(ctx.out_dir.glob("*.csv")):
        ctx.track(p)
    report.save_train_figure(log, ctx.track(ctx.out_dir / "training.png"))
    holdout_ssim = optimize.evaluate_ssim(gset, scen, scen.holdout_idx)
    (ctx.out_dir / "metrics.json").write_text(json.dumps(
        {"holdout_ssim": holdout_ssim,
         "final_loss_vis": log.rows[-1]["loss_vis"],
         "final_loss_phys": log.rows[-1]["loss_phys"]}, indent=1))
    ctx.track(ctx.out_dir / "metrics.json")
    ctx.finish("success")
    print(f"trained {len(log.rows)} iterations, held-out SSIM {holdout_ssim:.4f} "
          f"-> {ctx.out_dir}")
    return 0


def _gradcheck_loss(scen: Scenario, config: ScenarioConfig, kind: str):
    """Loss/grad pair used by the gradcheck subcommand."""
    lam = config.train.lambda_phys if config.train.lambda_phys > 0 else 1.0
    views = scen.train_idx[:3]

    def vis_part(gset, grads):
        total = 0.0
        for k in views:
            target, tape = splat.render_with_tape(gset, scen.cameras[k])
            lv, g_img, _ = splat.visual_loss(target, scen.images[k])
            total += lv
            if grads is not None:
                splat.render_backward(tape, gset, scen.cameras[k], g_img, grads)
        return total

    def phys_part(gset, grads):
        want = grads is not None
        val, pg, _, _ = optimize.physics_eval(gset, scen, config.train, want_grad=want)
        if want:
            grads.means += lam * pg.means
            grads.rotations += lam * pg.rotations
            grads.log_scales += lam * pg.log_scales
            grads.opacity_logits += lam * pg.opacity_logits
            grads.sh_coeffs += lam * pg.sh_coeffs
        return lam * val

    if kind == "objective":
        def loss(gset):
            return phys_part(gset, None)

        def grad(gset):
            g = GradBuffer.zeros_like(gset)
            phys_part(gset, g)
            return g
    elif kind == "visual":
        def loss(gset):
            return vis_part(gset, None)

        def grad(gset):
            g = GradBuffer.zeros_like(gset)
            vis_part(gset, g)
            return g
    else:  # joint
        def loss(gset):
            return vis_part(gset, None) + phys_part(gset, None)

        def grad(gset):
            g = GradBuffer.zeros_like(gset)
            vis_part(gset, g)
            phys_part(gset, g)
            return g
    return loss, grad


def cmd_gradcheck(args, overrides) -> int:
    config = _load_config(args, overrides)
    scen = gen_scenario(config)
    ctx = RunContext("gradcheck", config, _out_dir(args, config, "gradcheck"),
                     sys.argv[1:])
    loss, grad = _gradcheck_loss(scen, config, args.loss)
    gset = scen.initial_set.copy()
    rep = adjoint.gradcheck(loss, grad, gset, eps=args.eps, seed=config.seed,
                            max_coords=args.max_coords)
    rep.write_csv(ctx.track(ctx.out_dir / "gradcheck.csv"))
    report.save_gradcheck_figure(rep, ctx.track(ctx.out_dir / "gradcheck.png"))
    ok = rep.max_rel <= GRADCHECK_GATE
    ctx.finish("success" if ok else "failed",
               None if ok else f"max rel error {rep.max_rel:.3e} > {GRADCHECK_GATE}")
    print(f"gradcheck [{args.loss}]: max rel {rep.max_rel:.3e} "
          f"median {rep.median_rel:.3e} flagged {rep.flagged} "
          f"({rep.elapsed:.1f} s) -> {ctx.out_dir}")
    return 0 if ok else 3


def cmd_sweep(args, overrides) -> int:
    config = _load_config(args, overrides)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip() != ""]
    except ValueError as e:
        raise UsageError(f"bad --lambdas value: {e}") from e
    if not lambdas:
        raise UsageError("--lambdas needs at least one value")
    scen = gen_scenario(config)
    ctx = RunContext("sweep", config, _out_dir(args, config, "sweep"), sys.argv[1:])
    rows = optimize.sweep(scen, config.train, lambdas, out_dir=ctx.out_dir,
                          quiet=args.quiet)
    optimize.write_sweep_csv(rows, ctx.track(ctx.out_dir / "sweep.csv"))
    report.save_sweep_figure(rows, ctx.track(ctx.out_dir / "sweep.png"))
    failed = [r for r in rows if r.error is not None]
    ctx.finish("success" if not failed else "failed",
               None if not failed else f"{len(failed)} lambda runs failed")
    for r in rows:
        print(f"  lambda {r.lambda_phys:g}: ssim {r.final_ssim:.4f} "
              f"objective {r.neg_phys:.4f}" + (f"  [{r.error}]" if r.error else ""))
    return 0 if not failed else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fluidsplat",
        description="Physics-guided optimization of Gaussian scenes "
                    "(config fields can be overridden with --dot.path=value)")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="scenario config JSON")
        sp.add_argument("--out", help="parent directory for the run output")
        sp.add_argument("--seed", type=int, default=None, help="override scenario seed")
        sp.add_argument("--threads", type=int, default=0,
                        help="cap worker threads (results are thread-count invariant)")
        sp.add_argument("--quiet", action="store_true")

    for name, fn in (("render", cmd_render), ("mask", cmd_mask),
                     ("simulate", cmd_simulate), ("optimize", cmd_optimize)):
        sp = sub.add_parser(name)
        common(sp)
        if name in ("render", "mask", "simulate"):
            sp.add_argument("--gaussians", help="PLY checkpoint to use instead of "
                                                "the generated ground truth")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("gradcheck")
    common(sp)
    sp.add_argument("--loss", choices=("joint", "objective", "visual"),
                    default="joint")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--max-coords", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep")
    common(sp)
    sp.add_argument("--lambdas", required=True,
                    help="comma-separated physics weights")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    plain, overrides = _split_args(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(plain)
        if args.threads and args.threads > 0:
            try:
                import numba
                numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
            except Exception:
                pass
        return args.func(args, overrides)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except FluidSplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
