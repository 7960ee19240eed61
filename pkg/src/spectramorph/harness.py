"""Experiment orchestration: fusion runs, synthetic grids, oracle mode, ablations, reports."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import degrade as dg
from .cube import (
    CropSpec,
    DataCube,
    apply_srf,
    check_srf,
    crop,
    flatten,
    gaussian_srf,
    load_cube,
    load_srf,
    normalize_unit,
    save_cube,
    split_train_test,
)
from .latent import (
    TrainConfig,
    count_params,
    estimate_flops,
    fit_pixels,
    infer,
    init_model,
    save_model,
    train,
)
from .metrics import METRIC_NAMES, MetricOptions, QualityReport, evaluate
from .psf import KINDS, make_kernel
from .unmix import NmfOptions, choose_k, nmf

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SPECTRAMORPH_OUTPUT_ROOT"
RC_GRID = ((4, 4), (8, 4), (16, 4), (32, 4), (8, 1), (8, 3), (8, 8), (8, 16))


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    # inputs
    gt_path: Optional[str] = None
    lr_hsi_path: Optional[str] = None
    hr_msi_path: Optional[str] = None
    srf_path: Optional[str] = None
    srf_paths: dict = field(default_factory=dict)
    dataset: Optional[str] = None
    # degradation
    psf_kind: str = "gaussian"
    psf_params: dict = field(default_factory=dict)
    r: int = 8
    c: int = 4
    hsi_snr_db: Optional[float] = None
    msi_snr_db: float = dg.MSI_SNR_DB
    # grid
    psf_kinds: tuple = KINDS
    rc_grid: tuple = RC_GRID
    # model
    K: Optional[int] = None
    hidden: tuple = (1024,)
    hidden_activation: str = "relu"
    output_mode: str = "linear"
    csp_s: int = 4
    use_csp: Optional[bool] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle_train: Optional[TrainConfig] = None
    nmf: NmfOptions = field(default_factory=NmfOptions)
    # run
    seed: int = 0
    eval_region: str = "test"
    split_fraction: float = 0.75
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.eval_region not in ("test", "full"):
            raise ValueError(f"eval_region must be 'test' or 'full', got {self.eval_region!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.psf_kinds = tuple(self.psf_kinds)
        self.rc_grid = tuple((int(r), int(c)) for r, c in self.rc_grid)
        self.srf_paths = {int(k): v for k, v in self.srf_paths.items()}

    @property
    def csp_enabled(self) -> bool:
        return self.c == 1 if self.use_csp is None else bool(self.use_csp)

    def resolved_k(self) -> int:
        return choose_k(self.dataset, self.K)

    def snapshot(self) -> str:
        return dump_config(self)

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot().encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ config text


def _opt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_sections(cfg: ExperimentConfig) -> dict:
    """Ordered ``{section: {key: text}}`` view of every config field."""
    data = {
        "gt": _opt(cfg.gt_path),
        "lr_hsi": _opt(cfg.lr_hsi_path),
        "hr_msi": _opt(cfg.hr_msi_path),
        "srf": _opt(cfg.srf_path),
        "dataset": _opt(cfg.dataset),
    }
    for c in sorted(cfg.srf_paths):
        data[f"srf.{c}"] = cfg.srf_paths[c]
    deg = {
        "psf": cfg.psf_kind,
        "r": _opt(cfg.r),
        "c": _opt(cfg.c),
        "hsi_snr_db": _opt(cfg.hsi_snr_db),
        "msi_snr_db": _opt(cfg.msi_snr_db),
    }
    for k in sorted(cfg.psf_params):
        deg[f"psf.{k}"] = _opt(float(cfg.psf_params[k]))
    sections = {
        "data": data,
        "degrade": deg,
        "grid": {
            "psf_kinds": ", ".join(cfg.psf_kinds),
            "rc": ", ".join(f"{r}x{c}" for r, c in cfg.rc_grid),
        },
        "model": {
            "K": _opt(cfg.K),
            "hidden": ",".join(str(h) for h in cfg.hidden) or "none",
            "hidden_activation": cfg.hidden_activation,
            "output_mode": cfg.output_mode,
            "csp_s": _opt(cfg.csp_s),
            "use_csp": _opt(cfg.use_csp),
        },
        "train": {f.name: _opt(getattr(cfg.train, f.name)) for f in dataclasses.fields(TrainConfig)},
        "nmf": {f.name: _opt(getattr(cfg.nmf, f.name)) for f in dataclasses.fields(NmfOptions)},
        "run": {
            "seed": _opt(cfg.seed),
            "eval_region": cfg.eval_region,
            "split_fraction": _opt(cfg.split_fraction),
        },
    }
    if cfg.oracle_train is not None:
        sections["oracle_train"] = {
            f.name: _opt(getattr(cfg.oracle_train, f.name)) for f in dataclasses.fields(TrainConfig)
        }
    return sections


def dump_config(cfg: ExperimentConfig) -> str:
    out = []
    for name, entries in config_sections(cfg).items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {v}" for k, v in entries.items())
        out.append("")
    return "\n".join(out)


def flat_config(cfg: ExperimentConfig) -> dict:
    return {f"{s}.{k}": v for s, entries in config_sections(cfg).items() for k, v in entries.items()}


def _auto(v: Optional[str]):
    return None if v is None or v.strip().lower() in ("auto", "none", "") else v.strip()


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _typed_dataclass(cls, section: Optional[configparser.SectionProxy]):
    if section is None:
        return cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in section:
            continue
        raw = section[f.name]
        default = getattr(cls(), f.name)
        if isinstance(default, bool):
            kwargs[f.name] = _bool(raw)
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw.strip()
    unknown = set(section) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in [{section.name}]: {', '.join(sorted(unknown))}")
    return cls(**kwargs)


def parse_rc(text: str) -> tuple:
    pairs = []
    for item in text.replace(";", ",").split(","):
        item = item.strip().lower()
        if not item:
            continue
        r, c = item.split("x")
        pairs.append((int(r), int(c)))
    return tuple(pairs)


def parse_config(text: str, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Build a config from sectioned ``key = value`` text (see :func:`dump_config`).

    Relative paths are resolved against ``base_dir`` when given.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)

    def path(v):
        v = _auto(v)
        if v is None:
            return None
        p = Path(v)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return str(p)

    kw: dict = {}
    if cp.has_section("data"):
        d = cp["data"]
        kw["gt_path"] = path(d.get("gt"))
        kw["lr_hsi_path"] = path(d.get("lr_hsi"))
        kw["hr_msi_path"] = path(d.get("hr_msi"))
        kw["srf_path"] = path(d.get("srf"))
        kw["dataset"] = _auto(d.get("dataset"))
        kw["srf_paths"] = {int(k.split(".", 1)[1]): path(v) for k, v in d.items() if k.startswith("srf.")}
    if cp.has_section("degrade"):
        d = cp["degrade"]
        kw["psf_kind"] = d.get("psf", "gaussian").strip()
        kw["psf_params"] = {k.split(".", 1)[1]: float(v) for k, v in d.items() if k.startswith("psf.")}
        if "r" in d:
            kw["r"] = int(d["r"])
        if "c" in d:
            kw["c"] = int(d["c"])
        snr = _auto(d.get("hsi_snr_db"))
        kw["hsi_snr_db"] = None if snr is None else float(snr)
        if "msi_snr_db" in d:
            kw["msi_snr_db"] = float(d["msi_snr_db"])
    if cp.has_section("grid"):
        g = cp["grid"]
        if "psf_kinds" in g:
            kw["psf_kinds"] = tuple(k.strip() for k in g["psf_kinds"].split(",") if k.strip())
        if "rc" in g:
            kw["rc_grid"] = parse_rc(g["rc"])
    if cp.has_section("model"):
        m = cp["model"]
        k = _auto(m.get("K"))
        kw["K"] = None if k is None else int(k)
        if "hidden" in m:
            h = m["hidden"].strip().lower()
            kw["hidden"] = () if h in ("none", "0", "") else tuple(int(x) for x in h.split(","))
        for key in ("hidden_activation", "output_mode"):
            if key in m:
                kw[key] = m[key].strip()
        if "csp_s" in m:
            kw["csp_s"] = int(m["csp_s"])
        use = _auto(m.get("use_csp"))
        kw["use_csp"] = None if use is None else _bool(use)
    kw["train"] = _typed_dataclass(TrainConfig, cp["train"] if cp.has_section("train") else None)
    if cp.has_section("oracle_train"):
        kw["oracle_train"] = _typed_dataclass(TrainConfig, cp["oracle_train"])
    kw["nmf"] = _typed_dataclass(NmfOptions, cp["nmf"] if cp.has_section("nmf") else None)
    if cp.has_section("run"):
        run = cp["run"]
        if "seed" in run:
            kw["seed"] = int(run["seed"])
        if "eval_region" in run:
            kw["eval_region"] = run["eval_region"].strip()
        if "split_fraction" in run:
            kw["split_fraction"] = float(run["split_fraction"])
        kw["out_dir"] = path(run.get("out_dir"))
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), base_dir=p.parent)


# ----------------------------------------------------------------------- records


@dataclass(eq=False)
class RunRecord:
    config: ExperimentConfig
    snapshot: str
    config_sha256: str
    report: Optional[QualityReport]
    timings: dict
    input_hashes: dict
    label: str = "fusion"
    outputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict, repr=False)


def array_digest(values: np.ndarray) -> str:
    a = np.ascontiguousarray(values, dtype="<f8")
    return hashlib.sha256(a.tobytes()).hexdigest()


class _Stages:
    def __init__(self):
        self.timings: dict = {}

    def run(self, name: str, fn: Callable, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001  re-raised with the stage tag
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def _load_gt(cfg: ExperimentConfig, gt: Optional[DataCube]) -> Optional[DataCube]:
    if gt is None and cfg.gt_path:
        gt = load_cube(cfg.gt_path)
    if gt is None:
        return None
    v = gt.values
    if v.min() < 0 or v.max() > 1:
        gt = normalize_unit(gt)
    return gt


def _resolve_srf(cfg: ExperimentConfig, bands: int, srf: Optional[np.ndarray]) -> np.ndarray:
    if srf is not None:
        out = check_srf(srf)
    elif cfg.c in cfg.srf_paths:
        out = load_srf(cfg.srf_paths[cfg.c])
    elif cfg.srf_path:
        out = load_srf(cfg.srf_path)
    else:
        out = gaussian_srf(bands, cfg.c)
    if out.shape[0] != bands:
        raise ValueError(f"SRF has {out.shape[0]} rows, HSI has {bands} bands")
    return out


def _ratio(lr: DataCube, hr: DataCube) -> int:
    if hr.height % lr.height or hr.width % lr.width or hr.height // lr.height != hr.width // lr.width:
        raise ValueError(f"HR {hr.height}x{hr.width} is not an integer multiple of LR {lr.height}x{lr.width}")
    return hr.height // lr.height


def _observations(cfg, gt, lr_hsi, hr_msi, srf, stages):
    if lr_hsi is None and cfg.lr_hsi_path:
        lr_hsi = stages.run("load", load_cube, cfg.lr_hsi_path)
    if hr_msi is None and cfg.hr_msi_path:
        hr_msi = stages.run("load", load_cube, cfg.hr_msi_path)
    bands = (gt or lr_hsi).bands if (gt or lr_hsi) is not None else None
    if bands is None:
        raise StageError("load", ValueError("need a GT cube or an LR-HSI/HR-MSI pair"))
    srf = stages.run("load", _resolve_srf, cfg, bands, srf)
    if lr_hsi is None or hr_msi is None:
        if gt is None:
            raise StageError("load", ValueError("observations missing and no GT to synthesize them"))
        dcfg = dg.DegradeConfig(
            r=cfg.r,
            srf=srf,
            psf=make_kernel(cfg.psf_kind, cfg.psf_params),
            hsi_snr_db=cfg.hsi_snr_db,
            msi_snr_db=cfg.msi_snr_db,
            seed=cfg.seed,
        )
        lr_hsi, hr_msi = stages.run("degrade", dg.wald_generate, gt, dcfg)
    if hr_msi.bands != srf.shape[1]:
        raise StageError("load", ValueError(f"HR-MSI has {hr_msi.bands} bands, SRF has {srf.shape[1]} columns"))
    r = stages.run("load", _ratio, lr_hsi, hr_msi)
    return lr_hsi, hr_msi, srf, r


def _eval_region(cfg: ExperimentConfig, gt: DataCube) -> Optional[CropSpec]:
    if cfg.eval_region == "full":
        return None
    return split_train_test(gt, cfg.split_fraction)[1]


def _seeded_train(cfg: ExperimentConfig, tc: Optional[TrainConfig] = None) -> TrainConfig:
    return dataclasses.replace(tc or cfg.train, seed=cfg.seed)


def run_fusion(
    cfg: ExperimentConfig,
    gt: Optional[DataCube] = None,
    lr_hsi: Optional[DataCube] = None,
    hr_msi: Optional[DataCube] = None,
    srf: Optional[np.ndarray] = None,
    write: bool = True,
) -> RunRecord:
    """Unmix the LR-HSI, train on the synthesized LR-MSI, infer on the HR-MSI, score on the test crop.

    Observations are synthesized from the GT unless provided (as arguments or
    config paths). Metrics are computed only when a GT is available.
    """
    stages = _Stages()
    gt = stages.run("load", _load_gt, cfg, gt)
    lr_hsi, hr_msi, srf, r = _observations(cfg, gt, lr_hsi, hr_msi, srf, stages)
    K = stages.run("unmix", cfg.resolved_k)
    nmf_res = stages.run("unmix", nmf, flatten(lr_hsi), K, cfg.nmf)
    E = nmf_res.dictionary
    E_before = E.copy()

    z = stages.run("train", apply_srf, lr_hsi, srf)
    csp_train = csp_infer = None
    if cfg.csp_enabled:
        csp_train = stages.run("train", dg.build_csp, lr_hsi, cfg.csp_s)
        csp_infer = stages.run("infer", dg.build_inference_csp, lr_hsi, r)
    tc = _seeded_train(cfg)
    result = stages.run("train", train, z, lr_hsi, E, tc, csp_train,
                        cfg.hidden, cfg.hidden_activation, cfg.output_mode)
    hr_est, alle = stages.run("infer", infer, result.model, hr_msi, E, csp_infer)
    if not np.array_equal(E, E_before):
        raise StageError("train", AssertionError("endmember dictionary changed during training"))

    report = None
    if gt is not None:
        region = stages.run("metrics", _eval_region, cfg, gt)
        report = stages.run("metrics", evaluate, gt, hr_est, MetricOptions.for_ratio(r), region)
    n_hr = hr_msi.height * hr_msi.width
    if report is not None:
        report.params = count_params(result.model)
        report.flops = estimate_flops(result.model, n_hr, lr_hsi.bands)
        report.wall_time_s = sum(stages.timings.values())

    record = RunRecord(
        config=cfg,
        snapshot=cfg.snapshot(),
        config_sha256=cfg.digest(),
        report=report,
        timings=dict(stages.timings),
        input_hashes=_input_hashes(gt, lr_hsi, hr_msi, srf),
        artifacts={
            "lr_hsi": lr_hsi,
            "hr_msi": hr_msi,
            "hr_hsi_est": hr_est,
            "alle": alle,
            "endmembers": E,
            "model": result.model,
            "train_loss": result.final_loss,
            "nmf": nmf_res,
            "srf": srf,
            "r": r,
        },
    )
    if write and cfg.out_dir:
        write_run(record, Path(cfg.out_dir))
    return record


def _input_hashes(gt, lr_hsi, hr_msi, srf) -> dict:
    out = {"lr_hsi": array_digest(lr_hsi.values), "hr_msi": array_digest(hr_msi.values),
           "srf": array_digest(srf)}
    if gt is not None:
        out["gt"] = array_digest(gt.values)
    return out


def run_oracle(cfg: ExperimentConfig, gt: Optional[DataCube] = None, write: bool = True) -> RunRecord:
    """Upper-bound diagnostic: GT-derived endmembers and supervised training on the train crop.

    The network maps HR-MSI pixels of the train crop to GT spectra, and is
    scored on the disjoint test crop.
    """
    stages = _Stages()
    gt = stages.run("load", _load_gt, cfg, gt)
    if gt is None:
        raise StageError("load", ValueError("oracle mode needs the ground-truth cube"))
    lr_hsi, hr_msi, srf, r = _observations(cfg, gt, None, None, None, stages)
    train_box, test_box = stages.run("split", split_train_test, gt, cfg.split_fraction)
    if train_box.overlaps(test_box):
        raise StageError("split", AssertionError("train and test crops overlap"))
    K = stages.run("unmix", cfg.resolved_k)
    nmf_res = stages.run("unmix", nmf, flatten(gt), K, cfg.nmf)
    E = nmf_res.dictionary

    csp = stages.run("infer", dg.build_inference_csp, lr_hsi, r) if cfg.csp_enabled else None

    def inputs(box):
        m = crop(hr_msi, box)
        feats = flatten(m)
        if csp is not None:
            feats = np.concatenate([feats, flatten(crop(csp, box))], axis=1)
        return m, feats

    _, x_train = inputs(train_box)
    tc = _seeded_train(cfg, cfg.oracle_train)
    model = init_model(x_train.shape[1], K, cfg.hidden, cfg.hidden_activation, cfg.output_mode, tc.seed)
    result = stages.run("train", fit_pixels, model, x_train, flatten(crop(gt, train_box)), E, tc)
    m_test = crop(hr_msi, test_box)
    csp_test = crop(csp, test_box) if csp is not None else None
    est, alle = stages.run("infer", infer, result.model, m_test, E, csp_test)
    gt_test = crop(gt, test_box)
    report = stages.run("metrics", evaluate, gt_test, est, MetricOptions.for_ratio(r))
    report.params = count_params(result.model)
    report.flops = estimate_flops(result.model, m_test.height * m_test.width, gt.bands)
    report.wall_time_s = sum(stages.timings.values())
    record = RunRecord(
        config=cfg,
        snapshot=cfg.snapshot(),
        config_sha256=cfg.digest(),
        report=report,
        timings=dict(stages.timings),
        input_hashes=_input_hashes(gt, lr_hsi, hr_msi, srf),
        label="oracle",
        artifacts={
            "lr_hsi": lr_hsi,
            "hr_msi": hr_msi,
            "hr_hsi_est": est,
            "alle": alle,
            "endmembers": E,
            "model": result.model,
            "train_box": train_box,
            "test_box": test_box,
            "gt_test": gt_test,
        },
    )
    if write and cfg.out_dir:
        write_run(record, Path(cfg.out_dir))
    return record


# --------------------------------------------------------------------- ablations


def _set_train(**changes):
    return lambda cfg: dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))


def _set(**changes):
    return lambda cfg: dataclasses.replace(cfg, **changes)


def _shift_k(delta: int):
    def apply(cfg: ExperimentConfig) -> ExperimentConfig:
        k = cfg.resolved_k() + delta
        if k < 1:
            raise ValueError(f"K{delta:+d} leaves no endmembers")
        return dataclasses.replace(cfg, K=k)
    return apply


ABLATIONS: dict = {
    "nn": _set(output_mode="relu"),
    "nn_sum1": _set(output_mode="softmax"),
    "no_hidden": _set(hidden=()),
    "hidden_64": _set(hidden=(64,)),
    "hidden_128": _set(hidden=(128,)),
    "hidden_256": _set(hidden=(256,)),
    "hidden_512": _set(hidden=(512,)),
    "hidden_2048": _set(hidden=(2048,)),
    "two_hidden": _set(hidden=(1024, 1024)),
    "mse": _set_train(loss="mse"),
    "leaky_relu": _set(hidden_activation="leaky_relu"),
    "gelu": _set(hidden_activation="gelu"),
    "tanh": _set(hidden_activation="tanh"),
    "k_plus_4": _shift_k(4),
    "k_minus_4": _shift_k(-4),
    "csp_off": _set(use_csp=False),
    "csp_s2": _set(csp_s=2),
    "csp_s8": _set(csp_s=8),
    "csp_s16": _set(csp_s=16),
}


def ablation_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "baseline":
        return cfg
    try:
        return ABLATIONS[variant](cfg)
    except KeyError:
        raise ValueError(f"unknown ablation {variant!r}; choose from baseline, {', '.join(ABLATIONS)}") from None


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> dict:
    fa, fb = flat_config(a), flat_config(b)
    return {k: (fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def run_ablation(cfg: ExperimentConfig, variant: str, gt: Optional[DataCube] = None,
                 write: bool = True) -> RunRecord:
    """Run the fusion pipeline with exactly one registered deviation from ``cfg``."""
    varied = ablation_config(cfg, variant)
    if variant != "baseline" and cfg.out_dir:
        varied = dataclasses.replace(varied, out_dir=str(Path(cfg.out_dir) / variant))
    record = run_fusion(varied, gt=gt, write=write)
    record.label = variant
    return record


# -------------------------------------------------------------------------- grid


def grid_configs(cfg: ExperimentConfig) -> list:
    out = []
    for kind in cfg.psf_kinds:
        for r, c in cfg.rc_grid:
            sub = None
            if cfg.out_dir:
                sub = str(Path(cfg.out_dir) / f"{kind}_r{r}_c{c}")
            out.append(dataclasses.replace(cfg, psf_kind=kind, r=r, c=c, hsi_snr_db=None, out_dir=sub))
    return out


def _grid_worker(args):
    sub, gt = args
    rec = run_fusion(sub, gt=gt)
    rec.artifacts = {}
    return rec


def run_grid(cfg: ExperimentConfig, gt: Optional[DataCube] = None, jobs: int = 1) -> list:
    """Every PSF x (r, c) combination; independent runs may go to worker processes."""
    gt = _load_gt(cfg, gt)
    if gt is None:
        raise StageError("load", ValueError("grid mode needs the ground-truth cube"))
    subs = grid_configs(cfg)
    if jobs <= 1:
        return [_grid_worker((s, gt)) for s in subs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_grid_worker, [(s, gt) for s in subs]))


# ----------------------------------------------------------------------- writing


def write_run(record: RunRecord, out_dir: Path) -> None:
    """Persist cubes, dictionary, model, report and snapshot under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config_sha256": record.config_sha256, "producer": "spectramorph", "role": ""}
    (out_dir / "config.snapshot").write_text(record.snapshot, encoding="utf-8")
    art = record.artifacts
    for name in ("lr_hsi", "hr_msi", "hr_hsi_est", "alle"):
        if name in art:
            save_cube(art[name], out_dir / name, meta=dict(meta, role=name))
            record.outputs[name] = str(out_dir / name)
    if "endmembers" in art:
        write_endmembers(art["endmembers"], out_dir / "endmembers.csv")
        record.outputs["endmembers"] = str(out_dir / "endmembers.csv")
    if "model" in art:
        save_model(art["model"], out_dir / "model.len")
    if record.report is not None:
        (out_dir / "report.csv").write_text(report_csv([record]), encoding="utf-8")
        (out_dir / "report.txt").write_text(_report_text(record.report), encoding="utf-8")
        record.outputs["report"] = str(out_dir / "report.csv")
    # the output location is not part of the hashed snapshot, so reruns elsewhere stay byte-identical
    prov = [f"config_sha256 = {record.config_sha256}", f"label = {record.label}"]
    prov += [f"input.{k} = {v}" for k, v in sorted(record.input_hashes.items())]
    (out_dir / "provenance.txt").write_text("\n".join(prov) + "\n", encoding="utf-8")
    timing = io.StringIO()
    w = csv.writer(timing, lineterminator="\n")
    w.writerow(["stage", "seconds"])
    w.writerows([[k, f"{v:.6f}"] for k, v in record.timings.items()])
    (out_dir / "timings.csv").write_text(timing.getvalue(), encoding="utf-8")


def _report_text(report: QualityReport) -> str:
    text = report.to_text()
    return "".join(line + "\n" for line in text.splitlines() if not line.startswith("wall_time_s"))


def write_endmembers(E: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"band{b}" for b in range(E.shape[1])])
        w.writerows([[repr(float(x)) for x in row] for row in E])


def read_endmembers(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in r] for r in rows[1:] if r])


REPORT_COLUMNS = ("label", "psf", "r", "c") + METRIC_NAMES + ("params", "flops")


def report_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rec in records:
        rep = rec.report
        row = [rec.label, rec.config.psf_kind, rec.config.r, rec.config.c]
        row += [_num(getattr(rep, m)) for m in METRIC_NAMES]
        row += [rep.params, rep.flops]
        w.writerow(row)
    return buf.getvalue()


def _num(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


# --------------------------------------------------------------------- summary


@dataclass
class Summary:
    n: int
    means: dict
    inf_psnr_excluded: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", *self.means, "inf_psnr_excluded"])
        w.writerow([self.n, *(_num(v) for v in self.means.values()), self.inf_psnr_excluded])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(k) for k in self.means)
        lines = [f"{'runs':<{width}}  {self.n}"]
        for k, v in self.means.items():
            lines.append(f"{k:<{width}}  {v:.6g}")
        if self.inf_psnr_excluded:
            lines.append(f"({self.inf_psnr_excluded} infinite PSNR values excluded from psnr_db)")
        return "\n".join(lines) + "\n"


def aggregate_reports(items: Iterable) -> Summary:
    """Per-metric means; infinite PSNR values are left out of the PSNR mean and counted."""
    reports = [it.report if isinstance(it, RunRecord) else it for it in items]
    reports = [r for r in reports if r is not None]
    if not reports:
        raise ValueError("no reports to aggregate")
    means, excluded = {}, 0
    for name in METRIC_NAMES:
        vals = [float(getattr(r, name)) for r in reports]
        if name == "psnr_db":
            finite = [v for v in vals if math.isfinite(v)]
            excluded = len(vals) - len(finite)
            means[name] = math.fsum(finite) / len(finite) if finite else math.inf
        else:
            means[name] = math.fsum(vals) / len(vals)
    return Summary(len(reports), means, excluded)


def read_report_csv(path) -> list:
    """Quality reports from a ``report.csv`` written by :func:`write_run`."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vals = {m: float(row[m]) for m in METRIC_NAMES}
            out.append(QualityReport(**vals,
                                     params=int(row["params"]) if row.get("params") else None,
                                     flops=int(row["flops"]) if row.get("flops") else None))
    return out


def default_out_dir(verb: str, cfg: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{verb}-{cfg.digest()[:12]}"
