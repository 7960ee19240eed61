"""Command-line entry point: ``spectramorph <verb> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import degrade as dg
from . import harness as hz
from .cube import CropSpec, flatten, gaussian_srf, load_cube, load_srf, normalize_unit, save_cube, save_srf, unflatten
from .metrics import MetricOptions, evaluate
from .psf import KINDS, make_kernel, save_kernel_csv
from .synthetic import planted_scene
from .unmix import NmfOptions, choose_k, nmf

log = logging.getLogger("spectramorph")


def _kv(text: str) -> tuple:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), float(v)


def _hidden(text: str) -> tuple:
    t = text.strip().lower()
    if t in ("0", "none", ""):
        return ()
    return tuple(int(x) for x in t.split(","))


def _add_config_args(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--out", "--out-dir", dest="out", help="run directory (default: $%s/<verb>-<hash>)" % hz.OUTPUT_ROOT_ENV)
    g = p.add_argument_group("data")
    g.add_argument("--gt", help="ground-truth HR-HSI cube (.hdr/.bin pair)")
    g.add_argument("--lr-hsi")
    g.add_argument("--hr-msi")
    g.add_argument("--srf", help="C x c SRF as CSV")
    g.add_argument("--dataset", help="scene tag used to pick K")
    g = p.add_argument_group("degradation")
    g.add_argument("--psf", choices=KINDS)
    g.add_argument("--psf-param", type=_kv, action="append", default=None, metavar="NAME=VALUE")
    g.add_argument("--r", type=int)
    g.add_argument("--c", type=int)
    g.add_argument("--hsi-snr", type=float)
    g.add_argument("--msi-snr", type=float)
    g = p.add_argument_group("model")
    g.add_argument("--k", type=int)
    g.add_argument("--hidden", type=_hidden, help="comma-separated widths, 0 for none")
    g.add_argument("--activation", choices=("relu", "leaky_relu", "gelu", "tanh"))
    g.add_argument("--output-mode", choices=("linear", "relu", "softmax"))
    g.add_argument("--csp-s", type=int)
    g.add_argument("--csp", dest="use_csp", action="store_true", default=None)
    g.add_argument("--no-csp", dest="use_csp", action="store_false")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr-max", type=float)
    g.add_argument("--loss", choices=("mae", "mse"))
    g.add_argument("--eval-region", choices=("test", "full"))


def build_config(args: argparse.Namespace, verb: str) -> hz.ExperimentConfig:
    cfg = hz.load_config(args.config) if getattr(args, "config", None) else hz.ExperimentConfig()
    top = {
        "gt_path": args.gt,
        "lr_hsi_path": args.lr_hsi,
        "hr_msi_path": args.hr_msi,
        "srf_path": args.srf,
        "dataset": args.dataset,
        "psf_kind": args.psf,
        "r": args.r,
        "c": args.c,
        "hsi_snr_db": args.hsi_snr,
        "msi_snr_db": args.msi_snr,
        "K": args.k,
        "hidden": args.hidden,
        "hidden_activation": args.activation,
        "output_mode": args.output_mode,
        "csp_s": args.csp_s,
        "use_csp": args.use_csp,
        "eval_region": args.eval_region,
        "seed": args.seed,
    }
    changes = {k: v for k, v in top.items() if v is not None}
    if args.psf_param:
        changes["psf_params"] = dict(args.psf_param)
    tchanges = {k: v for k, v in {"epochs": args.epochs, "batch_size": args.batch_size,
                                  "lr_max": args.lr_max, "loss": args.loss}.items() if v is not None}
    if tchanges:
        changes["train"] = dataclasses.replace(cfg.train, **tchanges)
    cfg = dataclasses.replace(cfg, **changes)
    out = args.out or cfg.out_dir or str(hz.default_out_dir(verb, cfg))
    return dataclasses.replace(cfg, out_dir=out)


def _print_report(rec: hz.RunRecord) -> None:
    if rec.report is not None:
        sys.stdout.write(hz._report_text(rec.report))
    print(f"outputs: {rec.config.out_dir}")


def cmd_degrade(args) -> int:
    gt = load_cube(args.gt)
    if gt.values.min() < 0 or gt.values.max() > 1:
        gt = normalize_unit(gt)
    srf = load_srf(args.srf) if args.srf else gaussian_srf(gt.bands, args.c)
    kernel = make_kernel(args.psf, dict(args.psf_param or []))
    cfg = dg.DegradeConfig(r=args.r, srf=srf, psf=kernel, hsi_snr_db=args.hsi_snr,
                           msi_snr_db=args.msi_snr, seed=args.seed)
    lr, msi = dg.wald_generate(gt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"psf": kernel.kind, "r": args.r, "seed": args.seed}
    save_cube(lr, out / "lr_hsi", meta=meta)
    save_cube(msi, out / "hr_msi", meta=meta)
    save_srf(cfg.srf, out / "srf.csv")
    save_kernel_csv(kernel, out / "psf.csv")
    print(f"lr_hsi {lr.height}x{lr.width}x{lr.bands}, hr_msi {msi.height}x{msi.width}x{msi.bands} -> {out}")
    return 0


def cmd_unmix(args) -> int:
    cube = load_cube(args.cube)
    K = choose_k(args.dataset, args.k)
    res = nmf(flatten(cube), K, NmfOptions(max_iters=args.max_iters, rel_tol=args.rel_tol, solver=args.solver))
    out = Path(args.out)
    if out.suffix == ".csv":
        em_path, out = out, out.parent
    else:
        em_path = out / "endmembers.csv"
    out.mkdir(parents=True, exist_ok=True)
    hz.write_endmembers(res.dictionary, em_path)
    save_cube(unflatten(res.weights, cube.height, cube.width), out / "abundances")
    print(f"K={K} iterations={res.iterations} relative_residual={res.residual:.6g} -> {out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = build_config(args, "fuse")
    _print_report(hz.run_fusion(cfg))
    return 0


def cmd_oracle(args) -> int:
    cfg = build_config(args, "oracle")
    _print_report(hz.run_oracle(cfg))
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args, "ablate")
    variants = ["baseline", *hz.ABLATIONS] if "all" in args.variant else args.variant
    records = []
    for v in variants:
        base = dataclasses.replace(cfg, out_dir=str(Path(cfg.out_dir) / "baseline")) if v == "baseline" else cfg
        rec = hz.run_ablation(base, v)
        records.append(rec)
        print(f"{v}: rmse={rec.report.rmse:.6g} sam={rec.report.sam_deg:.6g}" if rec.report else v)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "ablations.csv").write_text(hz.report_csv(records), encoding="utf-8")
    return 0


def cmd_grid(args) -> int:
    cfg = build_config(args, "grid")
    records = hz.run_grid(cfg, jobs=args.jobs)
    summary = hz.aggregate_reports(records)
    out = Path(cfg.out_dir)
    (out / "grid.csv").write_text(hz.report_csv(records), encoding="utf-8")
    (out / "summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    sys.stdout.write(summary.to_text())
    return 0


def cmd_metrics(args) -> int:
    gt, est = load_cube(args.gt), load_cube(args.est)
    opts = MetricOptions.for_ratio(args.r) if args.r else MetricOptions()
    region = CropSpec.parse(args.crop) if args.crop else None
    rep = evaluate(gt, est, opts, region)
    sys.stdout.write(rep.to_csv() if args.format == "csv" else rep.to_text())
    return 0


def cmd_report(args) -> int:
    reports = []
    for p in map(Path, args.paths):
        files = sorted(p.rglob("report.csv")) if p.is_dir() else [p]
        for f in files:
            reports.extend(hz.read_report_csv(f))
    summary = hz.aggregate_reports(reports)
    sys.stdout.write(summary.to_csv() if args.format == "csv" else summary.to_text())
    return 0


def cmd_psf(args) -> int:
    kernel = make_kernel(args.kind, dict(args.psf_param or []))
    save_kernel_csv(kernel, args.out)
    print(f"{kernel.kind} {kernel.size}x{kernel.size} -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    scene = planted_scene(args.height, args.width, args.bands, args.k, seed=args.seed,
                          feature_px=args.feature_px)
    meta = {"planted_k": args.k, "seed": args.seed}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cube(scene.cube, args.out, dtype="f64le", meta=meta)
    print(f"planted {args.height}x{args.width}x{args.bands} (K={args.k}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spectramorph", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("degrade", help="synthesize LR-HSI and HR-MSI from a GT cube")
    p.add_argument("--gt", required=True)
    p.add_argument("--srf")
    p.add_argument("--c", type=int, default=4, help="MSI bands when no SRF file is given")
    p.add_argument("--psf", choices=KINDS, default="gaussian")
    p.add_argument("--psf-param", type=_kv, action="append", metavar="NAME=VALUE")
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--hsi-snr", type=float, help="default: paired with r")
    p.add_argument("--msi-snr", type=float, default=dg.MSI_SNR_DB)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", "--out-dir", dest="out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("unmix", help="NMF endmembers of a cube")
    p.add_argument("--cube", "--lr-hsi", dest="cube", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--dataset")
    p.add_argument("--solver", choices=("hals", "mu"), default="hals")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--rel-tol", type=float, default=1e-5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unmix)

    for verb, fn, text in (("fuse", cmd_fuse, "run the fusion pipeline"),
                           ("oracle", cmd_oracle, "GT-supervised upper-bound run")):
        p = sub.add_parser(verb, help=text)
        _add_config_args(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="run registered single-change variants")
    _add_config_args(p)
    p.add_argument("--variant", action="append", required=True,
                   help="variant name, repeatable; 'all' runs every one")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grid", help="every PSF x (r, c) combination on one GT")
    _add_config_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("metrics", help="score an estimate against a reference cube")
    p.add_argument("--gt", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--crop", help="row0,col0,rows,cols")
    p.add_argument("--r", type=int, help="resolution ratio for ERGAS (uses 1/r)")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", help="aggregate report.csv files")
    p.add_argument("paths", nargs="+")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("psf", help="export a PSF kernel as CSV")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--psf-param", type=_kv, action="append", metavar="NAME=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("synth", help="write a planted low-rank test scene")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--feature-px", type=float, default=10.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except hz.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
