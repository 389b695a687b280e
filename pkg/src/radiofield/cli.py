"""Command-line entry point: ``radiofield <subcommand> ...``.

Subcommands: ``gen-data``, ``train``, ``eval``, ``predict``,
``fresnel-table`` and ``inspect-encoding``.  Files are only ever written
inside the directory given by ``--out``; commands without ``--out`` print
to standard output.

Exit codes: 0 success (for ``train``: converged), 1 usage error, 2 I/O
error, 3 numeric failure, 4 training stopped at the iteration cap,
130 interrupted (a checkpoint is flushed first).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig, dump_config, load_config
from .container import FormatError
from .dataset import FORMAT_VERSION, export_paths_csv, load_dataset, save_dataset
from .encoding import SceneBounds, ipe_arrays, make_encoding_config, normalize_points, pe_arrays
from .experiments import build_dataset, build_trainer
from .physics import AIR, ITU_MATERIALS, Material, fresnel_coefficients_array, itu_material, load_materials
from .sampling import DEFAULT_CONE_RATIO, Ray, frustum_gaussian
from .trainer import AblationFlags, RayBatch, infer_rays, load_model, trainer_from_checkpoint

log = logging.getLogger("radiofield")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CAP, EXIT_INTERRUPTED = 0, 1, 2, 3, 4, 130

DATASET_NAME = "dataset.rfds"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.rfck"
LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.yaml"


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- argument helpers ---------------------------------------------------------------------------


def _floats(text: str, n: int | None, sep: str = ",") -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(sep))
    except ValueError:
        raise UsageError(f"cannot parse numbers from {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} values in {text!r}, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise UsageError(f"non-finite value in {text!r}")
    return vals


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inside(out: Path, name: str) -> Path:
    """Resolve ``name`` inside ``out``, refusing anything that escapes it."""
    path = (out / name).resolve()
    if out.resolve() not in path.parents:
        raise UsageError(f"{name!r} would be written outside {out}")
    return path


def _parse_set(items) -> dict:
    import yaml

    updates = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        updates[key.strip()] = yaml.safe_load(value)
    return updates


def _run_config(args) -> RunConfig:
    try:
        return load_config(getattr(args, "config", None), args.preset, _parse_set(getattr(args, "set", None)))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _write_csv(rows, header, out: Path | None, name: str):
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return None
    path = _inside(out, name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# -- gen-data -----------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    updates = {}
    if args.room is not None:
        updates["data.room"] = list(_floats(args.room.lower(), 3, "x"))
    if args.tx is not None:
        updates["data.tx"] = list(_floats(args.tx, 3))
    for flag, key in (("n", "data.n"), ("seed", "data.seed"), ("material", "data.material"), ("fc", "data.fc"),
                      ("max_order", "data.max_order"), ("negatives", "data.negatives"),
                      ("prune_db", "data.min_relative_power_db")):
        value = getattr(args, flag)
        if value is not None:
            updates[key] = value
    try:
        cfg = cfg.with_updates(updates)
        data = cfg.data
        if data.n < 1:
            raise ValueError("--n must be at least 1")
        if data.fc <= 0:
            raise ValueError("--fc must be positive")
        room = data.room_model()
        if not room.contains(data.tx):
            raise ValueError(f"transmitter {data.tx} lies outside the {data.room} room")
        data.generation()
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    ds = build_dataset(cfg)
    path = _inside(out, args.name)
    save_dataset(ds, path)
    manifest = {
        "tool": "radiofield",
        "version": __version__,
        "format_version": FORMAT_VERSION,
        "seed": data.seed,
        "parameters": asdict(data),
        "n_requested": data.n,
        "n_samples": len(ds.samples),
        "splits": {name: int(ds.indices(name).size) for name in ("train", "val", "test")},
        "dataset": path.name,
        "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
    }
    _inside(out, MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if args.paths_csv:
        export_paths_csv(ds, _inside(out, Path(args.name).stem + "_paths.csv"))
    print(f"wrote {len(ds.samples)} receivers to {path}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------------------


def _flags(args, base: AblationFlags) -> AblationFlags:
    return replace(base,
                   scale_consistent=base.scale_consistent and not args.ablate_scale_consistent,
                   use_ipe=base.use_ipe and not args.ablate_ipe,
                   zeta_compensation=base.zeta_compensation and not args.ablate_zeta,
                   use_pe=base.use_pe and not args.ablate_pe)


def cmd_train(args) -> int:
    out = _out_dir(args)
    dataset = load_dataset(args.dataset)
    paths = {"log_path": _inside(out, LOG_NAME), "checkpoint_path": _inside(out, CHECKPOINT_NAME)}
    if args.resume:
        ckpt = paths["checkpoint_path"]
        if not ckpt.exists():
            raise FileNotFoundError(f"--resume: no checkpoint at {ckpt}")
        trainer = trainer_from_checkpoint(ckpt, dataset, **paths)
        print(f"resuming from iteration {trainer.iteration}")
    else:
        cfg = _run_config(args)
        updates = {}
        if args.seed is not None:
            updates["trainer.seed"] = args.seed
        if args.max_iters is not None:
            updates["trainer.max_iters"] = args.max_iters
        try:
            cfg = cfg.with_updates(updates)
            cfg = replace(cfg, ablation=_flags(args, cfg.ablation))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        dump_config(cfg, _inside(out, CONFIG_NAME))
        trainer = build_trainer(cfg, dataset, **paths)
        if args.init_from:
            trainer.load_checkpoint(args.init_from, weights_only=True)
            print(f"initialised weights from {args.init_from}")
    max_iters = args.max_iters if args.resume else None
    status = trainer.run(max_iters=max_iters)
    if not np.all(np.isfinite(trainer.params.flat)):
        raise NumericError("parameters became non-finite")
    best = min((v for _, v in trainer.history), default=math.nan)
    print(f"{status} after {trainer.iteration} iterations; best validation {best:.2f} dB; "
          f"checkpoint {paths['checkpoint_path']}")
    return {"converged": EXIT_OK, "cap": EXIT_CAP, "interrupted": EXIT_INTERRUPTED}[status]


# -- eval ---------------------------------------------------------------------------------------


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_eval(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    dataset = load_dataset(_require_file(args.dataset, "dataset"))
    trainer = trainer_from_checkpoint(ckpt, dataset, weights_only=True)
    try:
        report = trainer.evaluate(args.split, limit=args.limit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not math.isfinite(report.mean_db):
        raise NumericError("evaluation produced a non-finite NMSE")
    print(report.summary())
    if args.out:
        out = _out_dir(args)
        report.write_csv(_inside(out, f"eval_{args.split}.csv"))
        report.write_paths_csv(_inside(out, f"eval_{args.split}_paths.csv"))
    return EXIT_OK


# -- predict ------------------------------------------------------------------------------------


def _rays_for(rx, doas, zetas) -> RayBatch:
    from .sampling import direction_from_angles

    doas = np.asarray(doas, dtype=float).reshape(-1, 2)
    k = doas.shape[0]
    return RayBatch(np.repeat(np.asarray(rx, dtype=float)[None], k, axis=0),
                    direction_from_angles(doas[:, 0], doas[:, 1]).reshape(k, 3), doas[:, 0], doas[:, 1],
                    np.asarray(zetas, dtype=float), np.zeros(k, dtype=np.intp), np.zeros(1, dtype=complex),
                    np.zeros(1, dtype=int), 1)


def cmd_predict(args) -> int:
    pipeline, params, _ = load_model(_require_file(args.checkpoint, "checkpoint"))
    if args.receiver_id is not None:
        if args.dataset is None:
            raise UsageError("--receiver-id needs --dataset")
        ds = load_dataset(_require_file(args.dataset, "dataset"))
        if not 0 <= args.receiver_id < len(ds.samples):
            raise UsageError(f"--receiver-id must lie in [0, {len(ds.samples)})")
        s = ds.samples[args.receiver_id]
        rx, doas = s.receiver, list(s.noisy_doas)
        zetas = [p.zeta for p in s.paths] if not args.no_zeta else [1.0] * len(doas)
    else:
        if args.rx is None:
            raise UsageError("give --rx (with --doa ...) or --dataset with --receiver-id")
        rx = _floats(args.rx, 3)
        doas, zetas = [], []
        for item in args.doa or ():
            vals = _floats(item, None)
            if len(vals) not in (2, 3):
                raise UsageError(f"--doa expects theta,phi[,zeta], got {item!r}")
            theta, phi = vals[:2]
            if args.degrees:
                theta, phi = np.deg2rad(theta), np.deg2rad(phi)
            doas.append((theta, phi))
            zetas.append(vals[2] if len(vals) == 3 else 1.0)
    if doas:
        h, h_ray, peak = infer_rays(pipeline, params, _rays_for(rx, doas, zetas))
        cfr = complex(h[0])
    else:
        h_ray, peak, cfr = np.zeros(0, complex), np.zeros(0), 0j
    if not (math.isfinite(cfr.real) and math.isfinite(cfr.imag)):
        raise NumericError("prediction is not finite")
    header = ["ray", "theta_deg", "phi_deg", "zeta", "re", "im", "abs", "peak_depth_m"]
    rows = [[i, repr(float(np.rad2deg(t))), repr(float(np.rad2deg(p))), repr(float(z)), repr(float(h.real)),
             repr(float(h.imag)), repr(float(abs(h))), repr(float(d))]
            for i, ((t, p), z, h, d) in enumerate(zip(doas, zetas, h_ray, peak))]
    rows.append(["total", "", "", "", repr(cfr.real), repr(cfr.imag), repr(abs(cfr)), ""])
    if args.format == "csv":
        _write_csv(rows, header, _out_dir(args) if args.out else None, "prediction.csv")
        return EXIT_OK
    print(f"CFR = {cfr.real:+.6e} {cfr.imag:+.6e}j  (|H| = {abs(cfr):.6e}, {len(doas)} rays)")
    if doas:
        print(f"{'ray':>4} {'theta':>9} {'phi':>9} {'zeta':>7} {'|contribution|':>15} {'peak depth':>11}")
        for i, ((t, p), z, h, d) in enumerate(zip(doas, zetas, h_ray, peak)):
            print(f"{i:>4} {np.rad2deg(t):>9.3f} {np.rad2deg(p):>9.3f} {z:>7.4f} {abs(h):>15.6e} {d:>10.3f}m")
    return EXIT_OK


# -- fresnel-table ------------------------------------------------------------------------------


def _material(name: str, fc: float, table: dict) -> Material:
    if name in table:
        return table[name]
    if name == "air":
        return AIR
    if name in ITU_MATERIALS:
        return itu_material(name, fc)
    raise UsageError(f"unknown material {name!r}; known: {sorted(set(table) | set(ITU_MATERIALS) | {'air'})}")


def fresnel_rows(material_in: Material, material_out: Material, fc: float, step_deg: float):
    theta = np.arange(0.0, 90.0, step_deg)
    theta = theta[theta <= 89.9 + 1e-9]
    r_perp, r_par = fresnel_coefficients_array(np.deg2rad(theta), material_in, material_out, fc)
    r_perp = np.broadcast_to(r_perp, theta.shape)
    r_par = np.broadcast_to(r_par, theta.shape)
    return [[f"{t:.6g}", repr(float(a.real)), repr(float(a.imag)), repr(float(b.real)), repr(float(b.imag)),
             repr(float(abs(a) ** 2)), repr(float(abs(b) ** 2))] for t, a, b in zip(theta, r_perp, r_par)]


FRESNEL_COLUMNS = ["theta_deg", "re_r_perp", "im_r_perp", "re_r_par", "im_r_par", "R_perp", "R_par"]


def cmd_fresnel_table(args) -> int:
    if not 0 < args.step <= 90:
        raise UsageError("--step must lie in (0, 90]")
    if args.fc <= 0:
        raise UsageError("--fc must be positive")
    table = load_materials(args.materials) if args.materials else {}
    if args.eps_r is not None:
        try:
            target = Material("custom", args.eps_r, args.sigma)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        target = _material(args.material, args.fc, table)
    incident = _material(args.incident, args.fc, table)
    rows = fresnel_rows(incident, target, args.fc, args.step)
    _write_csv(rows, FRESNEL_COLUMNS, _out_dir(args) if args.out else None, f"fresnel_{target.name}.csv")
    return EXIT_OK


# -- inspect-encoding ---------------------------------------------------------------------------


def cmd_inspect_encoding(args) -> int:
    cfg = _run_config(args)
    dims = _floats(args.room.lower(), 3, "x") if args.room else cfg.data.room
    try:
        enc = make_encoding_config(SceneBounds.from_dims(dims), cfg.encoding.d_min, levels=cfg.encoding.levels,
                                   dir_levels=cfg.encoding.dir_levels, scale_consistent=not args.unscaled)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    origin = _floats(args.origin, 3)
    if not 0 <= args.t_lo < args.t_hi:
        raise UsageError("need 0 <= --t-lo < --t-hi")
    ray = Ray.from_angles(origin, np.deg2rad(args.theta), np.deg2rad(args.phi), cone_ratio=args.cone_ratio)
    g = frustum_gaussian(ray, args.t_lo, args.t_hi)
    pe = pe_arrays(g.mu[None], enc)[0]
    ipe = ipe_arrays(g.mu[None], g.diag_world[None], enc)[0]
    mu_n = normalize_points(g.mu, enc)
    rows, start = [], 0
    for axis, L in enumerate(enc.levels):
        for level in range(L):
            i = start + 2 * level
            rows.append(["xyz"[axis], level, repr(float(mu_n[axis])), repr(float(pe[i])), repr(float(pe[i + 1])),
                         repr(float(ipe[i])), repr(float(ipe[i + 1]))])
        start += 2 * L
    _write_csv(rows, ["axis", "level", "coord_normalized", "pe_sin", "pe_cos", "ipe_sin", "ipe_cos"],
               _out_dir(args) if args.out else None, "encoding.csv")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radiofield", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"radiofield {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS), default="scene-a")
        sp.add_argument("--config", help="YAML/JSON file of flat dotted keys (overrides the preset)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="simulate a shoebox dataset with the image method")
    config_args(g)
    g.add_argument("--room", help="LxWxH in metres")
    g.add_argument("--tx", help="transmitter x,y,z")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--material")
    g.add_argument("--fc", type=float)
    g.add_argument("--max-order", type=int)
    g.add_argument("--negatives", type=int)
    g.add_argument("--prune-db", type=float, help="drop paths this many dB below the strongest")
    g.add_argument("--name", default=DATASET_NAME)
    g.add_argument("--paths-csv", action="store_true", help="also export the per-path table")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a field on a dataset")
    config_args(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-iters", type=int)
    t.add_argument("--ablate-scale-consistent", action="store_true")
    t.add_argument("--ablate-ipe", action="store_true")
    t.add_argument("--ablate-zeta", action="store_true")
    t.add_argument("--ablate-pe", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--init-from", help="start from the weights of another checkpoint (fine-tuning)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--limit", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict the CFR at a receiver from its DoAs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--rx", help="receiver x,y,z")
    r.add_argument("--doa", action="append", metavar="THETA,PHI[,ZETA]")
    r.add_argument("--degrees", action=argparse.BooleanOptionalAction, default=True,
                   help="angles in degrees (default) or radians")
    r.add_argument("--dataset")
    r.add_argument("--receiver-id", type=int)
    r.add_argument("--no-zeta", action="store_true", help="use zeta = 1 for dataset receivers")
    r.add_argument("--format", choices=("table", "csv"), default="table")
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)

    f = sub.add_parser("fresnel-table", help="reflection coefficients versus incidence angle")
    f.add_argument("--material", default="concrete")
    f.add_argument("--incident", default="air")
    f.add_argument("--eps-r", type=float, help="custom lossy dielectric instead of --material")
    f.add_argument("--sigma", type=float, default=0.0)
    f.add_argument("--materials", help="YAML/JSON material table")
    f.add_argument("--fc", type=float, default=2.4e9)
    f.add_argument("--step", type=float, default=0.1)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fresnel_table)

    i = sub.add_parser("inspect-encoding", help="PE and IPE features of one frustum")
    config_args(i)
    i.add_argument("--room", help="LxWxH (defaults to the preset room)")
    i.add_argument("--origin", default="1,1,1")
    i.add_argument("--theta", type=float, default=60.0, help="degrees")
    i.add_argument("--phi", type=float, default=30.0, help="degrees")
    i.add_argument("--t-lo", type=float, default=2.0)
    i.add_argument("--t-hi", type=float, default=2.5)
    i.add_argument("--cone-ratio", type=float, default=DEFAULT_CONE_RATIO)
    i.add_argument("--unscaled", action="store_true", help="disable scale-consistent normalisation")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect_encoding)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"radiofield: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"radiofield {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"radiofield {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"radiofield {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
