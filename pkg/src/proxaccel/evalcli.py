"""Command-line experiment runner: data generation, training, solving and NMSE reports.

Every subcommand reads an optional key-value config file (``key = value`` per
line, ``#`` comments) whose values can be overridden by ``--seed``, ``--out``,
``--solver`` and ``--iters``. CSV outputs contain no timings, so reruns with
the same seed are byte-identical; timestamps live in the JSON sidecars.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import load_directory, read_pgm, synthetic_images, write_pgm
from .problems import ProblemConfig, derive_seed, initial_point, make_problem, parallel_map
from .solvers import SolverConfig, SolverTrace, fista_backtracking, ista, sgp_learned
from .stepnet import AdamConfig, PredictorArch, StepNet, init, load_params, serialize
from .training import StageLog, TrainConfig, build_corpus, train_multi
from .wavelet import WaveletSpec

__all__ = ["ExperimentConfig", "Report", "ConfigHashMismatch", "main", "run_solver", "aggregate",
           "write_curves", "cmd_gen_data", "cmd_train", "cmd_solve", "cmd_compare", "cmd_robustness",
           "SOLVERS", "CSV_HEADER"]

log = logging.getLogger("proxaccel")

SOLVERS = ("ista", "fista", "sgp-step", "sgp-diag")
LEARNED = {"sgp-step": "scalar", "sgp-diag": "grouped"}
CSV_HEADER = "iter,solver,mean_nmse_db,std_nmse_db,mean_objective"
SWEEPS = {"rates": (0.3, 0.5, 0.7), "lambda": (0.5, 2.0), "noise": (0.0, 5.0, 10.0)}


class ConfigHashMismatch(ValueError):
    pass


def _suffix(solver: str) -> str:
    return solver.split("-")[1]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _names(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(" ", "").split(",") if v)


def _shape(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    return int(parts[0]), int(parts[1])


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "inpainting"
    rate: float = 0.5
    blur_sigma: float = 2.0
    noise_sigma: float = 0.0
    lam: float = 0.1
    intensity_scale: float = 8.0
    wavelet: str = "sym4"
    levels: int = 3
    shape: tuple[int, int] = (32, 32)
    dataset: str = "synthetic"
    data_dir: str | None = None
    count: int = 30
    train_fraction: float = 2 / 3
    test_fraction: float = 1 / 3
    solvers: tuple[str, ...] = ("fista", "sgp-step", "sgp-diag")
    iters: int = 100
    checkpoints: tuple[int, ...] = (20, 100)
    model_step: str | None = None
    model_diag: str | None = None
    epochs: int = 30
    last_stage: int = 20
    batch_size: int = 16
    learning_rate: float = 3e-4
    channels: tuple[int, ...] = (16, 32)
    pool_after: tuple[int, ...] = (0,)
    beta: float = 1e-4
    eta: float = 0.5
    alpha: float = 0.9
    delta: float = 10.0
    t_max_factor: float = 10.0
    seed: int = 0
    out: str = "runs"

    _PARSERS = {
        "shape": _shape,
        "solvers": _names,
        "checkpoints": _ints,
        "channels": _ints,
        "pool_after": _ints,
    }
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ValueError("train_fraction and test_fraction must sum to 1")
        for s in self.solvers:
            if s not in SOLVERS:
                raise ValueError(f"unknown solver {s!r}; choose from {', '.join(SOLVERS)}")
        if self.iters < 1:
            raise ValueError("iters must be positive")
        if self.count < 1:
            raise ValueError("count must be positive")
        self.problem_config()  # validates kind, wavelet and scale

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.read_string("[run]\n" + text)
        values = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in parser["run"].items():
            name = cls._ALIASES.get(key, key)
            if name not in types:
                raise ValueError(f"unknown config key {key!r}")
            values[name] = cls._parse(name, raw, types[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        if path is None:
            return cls.from_text("", **overrides)
        return cls.from_text(Path(path).read_text(), **overrides)

    @classmethod
    def _parse(cls, name: str, raw: str, typ: str):
        if name in cls._PARSERS:
            return cls._PARSERS[name](raw)
        if raw.lower() in ("none", ""):
            return None
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw

    def problem_config(self, **changes) -> ProblemConfig:
        base = dict(kind=self.kind, rate=self.rate, blur_sigma=self.blur_sigma, noise_sigma=self.noise_sigma,
                    lam=self.lam, intensity_scale=self.intensity_scale,
                    wavelet=WaveletSpec(self.wavelet, self.levels))
        base.update(changes)
        return ProblemConfig(**base)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(max_iters=self.iters, beta=self.beta, eta=self.eta, eta1=self.eta, eta2=self.eta,
                            alpha=self.alpha, delta=self.delta)

    def arch(self, head: str) -> PredictorArch:
        return PredictorArch(in_channels=self.problem_config().in_channels, channels=self.channels,
                             pool_after=self.pool_after, head=head, levels=self.levels,
                             step_range=(1e-4, self.t_max_factor), delta=self.delta)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, last_stage=self.last_stage, batch_size=self.batch_size,
                           adam=AdamConfig(lr=self.learning_rate), seed=derive_seed(self.seed, 3))

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def images_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.out_dir / "images"

    def model_path(self, solver: str) -> Path:
        explicit = self.model_step if solver == "sgp-step" else self.model_diag
        return Path(explicit) if explicit else self.out_dir / f"model_{_suffix(solver)}.pxl"

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def hash(self) -> str:
        """Digest of everything that determines the numbers in a report (paths and solver list excluded)."""
        skip = {"out", "data_dir", "model_step", "model_diag", "solvers", "dataset"}
        payload = {k: v for k, v in self.as_dict().items() if k not in skip}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- helpers

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_sidecar(path: Path, cfg: ExperimentConfig, **extra) -> None:
    meta = {"config_hash": cfg.hash(), "config": cfg.as_dict(), "version": __version__, "written": _now(), **extra}
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def _split(cfg: ExperimentConfig, images: list[np.ndarray]) -> tuple[list, list]:
    n_train = int(round(len(images) * cfg.train_fraction))
    return images[:n_train], images[n_train:]


def _load_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    if not cfg.images_dir.is_dir():
        raise FileNotFoundError(f"image directory {cfg.images_dir} does not exist; run gen-data first")
    images = load_directory(cfg.images_dir, cfg.shape)
    return images


def _load_predictor(cfg: ExperimentConfig, solver: str) -> tuple[StepNet, str]:
    path = cfg.model_path(solver)
    if not path.is_file():
        raise FileNotFoundError(f"model file {path} for solver {solver} not found; run train first")
    params = load_params(path)
    if params.arch.head != LEARNED[solver]:
        raise ValueError(f"{path} holds a {params.arch.head} predictor, {solver} needs {LEARNED[solver]}")
    return StepNet(params), _sha256(path)


def run_solver(solver: str, p, x0, iters: int, cfg: SolverConfig, reference=None, predictor=None):
    if solver == "ista":
        return ista(p, x0, cfg, iters=iters, reference=reference)
    if solver == "fista":
        return fista_backtracking(p, x0, cfg, iters=iters, reference=reference)
    if solver in LEARNED:
        if predictor is None:
            raise ValueError(f"solver {solver} needs a trained predictor")
        return sgp_learned(p, x0, predictor, cfg, iters=iters, reference=reference, name=solver)
    raise ValueError(f"unknown solver {solver!r}")


def _padded(trace: SolverTrace, name: str, iters: int) -> np.ndarray:
    """Column of length ``iters + 1``; a run that stopped early holds its last value."""
    col = trace.column(name)
    if col.size < iters + 1:
        col = np.concatenate([col, np.full(iters + 1 - col.size, col[-1])])
    return col[: iters + 1]


@dataclass
class Report:
    """Per-solver mean and std of NMSE plus mean objective, on a shared iteration axis."""

    config_hash: str
    iters: int
    curves: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    problems: int = 0

    def at(self, solver: str, k: int) -> tuple[float, float, float]:
        c = self.curves[solver]
        return float(c["mean_nmse_db"][k]), float(c["std_nmse_db"][k]), float(c["mean_objective"][k])


def aggregate(tagged: list[tuple[str, str, SolverTrace]], iters: int) -> Report:
    """Reduce ``(config_hash, solver, trace)`` triples in the given order.

    All traces must come from the same configuration.
    """
    hashes = {h for h, _, _ in tagged}
    if len(hashes) != 1:
        raise ConfigHashMismatch(f"refusing to aggregate traces from configs {sorted(hashes)}")
    report = Report(hashes.pop(), iters)
    solvers = list(dict.fromkeys(s for _, s, _ in tagged))
    for s in solvers:
        traces = [t for _, name, t in tagged if name == s]
        nmse = np.stack([_padded(t, "nmse_db", iters) for t in traces])
        obj = np.stack([_padded(t, "objective", iters) for t in traces])
        report.curves[s] = {"mean_nmse_db": nmse.mean(axis=0), "std_nmse_db": nmse.std(axis=0),
                            "mean_objective": obj.mean(axis=0)}
        report.problems = len(traces)
    return report


def _csv(rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for k, solver, mean, std, obj in rows:
        buf.write(f"{k},{solver},{mean:.6f},{std:.6f},{obj:.6f}\n")
    return buf.getvalue()


def write_curves(report: Report, path, checkpoints=None) -> None:
    """CSV with every iteration, or only ``checkpoints`` when given."""
    ks = range(report.iters + 1) if checkpoints is None else [k for k in checkpoints if k <= report.iters]
    rows = [(k, s, *report.at(s, k)) for s in report.curves for k in ks]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_csv(rows))


def _evaluate(cfg: ExperimentConfig, pcfg: ProblemConfig, images, predictors: dict) -> Report:
    scfg = cfg.solver_config()
    h = cfg.hash()

    def one(item):
        i, img = item
        p, x_gt = make_problem(img, pcfg, derive_seed(cfg.seed, 2, i))
        x0 = initial_point(p, pcfg)
        return [(h, s, run_solver(s, p, x0, cfg.iters, scfg, x_gt, predictors.get(s))[1]) for s in cfg.solvers]

    results = parallel_map(one, enumerate(images))
    return aggregate([t for per in results for t in per], cfg.iters)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    """Write ``count`` [0, 1] grayscale images as PGM files."""
    out = cfg.images_dir
    out.mkdir(parents=True, exist_ok=True)
    if cfg.dataset == "synthetic":
        images = synthetic_images(cfg.count, derive_seed(cfg.seed, 0), cfg.shape)
    else:
        images = load_directory(cfg.dataset, cfg.shape)[: cfg.count]
        if len(images) < cfg.count:
            raise ValueError(f"{cfg.dataset} holds {len(images)} images, {cfg.count} requested")
    for i, img in enumerate(images):
        write_pgm(out / f"img_{i:04d}.pgm", img)
    log.info("wrote %d images to %s", len(images), out)
    return out


def _train_log(logs: list[StageLog]) -> str:
    lines = ["stage,epoch,samples,mean_loss"]
    lines += [f"{r.stage},{r.epoch},{r.samples},{r.mean_loss:.9e}" for r in logs]
    return "\n".join(lines) + "\n"


def cmd_train(cfg: ExperimentConfig) -> list[Path]:
    """Build the training corpus once and train one predictor per learned solver."""
    learned = [s for s in cfg.solvers if s in LEARNED]
    if not learned:
        raise ValueError("no learned solver (sgp-step, sgp-diag) selected for training")
    train, _ = _split(cfg, _load_images(cfg))
    if not train:
        raise ValueError("training split is empty")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    t0 = time.perf_counter()
    corpus = build_corpus(train, cfg.problem_config(), derive_seed(cfg.seed, 1))
    written = []
    for solver in learned:
        head = LEARNED[solver]
        params = init(cfg.arch(head), derive_seed(cfg.seed, 4))
        logs: list[StageLog] = []
        # each predictor sees its own banks, so train on a fresh copy of bank 0
        run_corpus = dataclasses.replace(corpus, banks=list(corpus.banks[:1]))
        params = train_multi(params, run_corpus, cfg.train_config(), logs,
                             progress=lambda k, r: log.info("%s stage %d loss %.6g", solver, k, r.mean_loss))
        path = cfg.out_dir / f"model_{_suffix(solver)}.pxl"
        path.write_bytes(serialize(params))
        log_path = cfg.out_dir / f"train_log_{_suffix(solver)}.csv"
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_train_log(logs))
        _write_sidecar(path.with_suffix(".json"), cfg, solver=solver, model_sha256=_sha256(path),
                       corpus_sha256=corpus.digest(), train_problems=len(train), started=started,
                       seconds=round(time.perf_counter() - t0, 3))
        written.append(path)
    return written


def cmd_solve(cfg: ExperimentConfig, image_path, solver: str) -> tuple[Path, Path]:
    """Recover one image; writes the recovered PGM and a per-iteration trace CSV."""
    img = read_pgm(image_path)
    if img.shape != tuple(cfg.shape):
        raise ValueError(f"image shape {img.shape} does not match configured shape {tuple(cfg.shape)}")
    predictor = None
    if solver in LEARNED:
        predictor, _ = _load_predictor(cfg, solver)
    pcfg = cfg.problem_config()
    p, x_gt = make_problem(img, pcfg, derive_seed(cfg.seed, 5))
    x, trace = run_solver(solver, p, initial_point(p, pcfg), cfg.iters, cfg.solver_config(), x_gt, predictor)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    rec_path = out / f"{stem}_{solver}.pgm"
    write_pgm(rec_path, p.model.transform.inverse(x) / pcfg.intensity_scale)
    csv_path = out / f"{stem}_{solver}_trace.csv"
    cols = ("objective", "fidelity", "nmse_db", "step", "gamma1", "gamma2", "use_cnn", "backtracks")
    data = {c: _padded(trace, c, cfg.iters) for c in cols}
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iter," + ",".join(cols) + "\n")
        for k in range(cfg.iters + 1):
            vals = [f"{data[c][k]:.6f}" for c in cols[:6]] + [str(int(data[c][k])) for c in cols[6:]]
            fh.write(f"{k}," + ",".join(vals) + "\n")
    _write_sidecar(csv_path.with_suffix(".json"), cfg, solver=solver, image=str(image_path), status=trace.status,
                   warnings=trace.warnings)
    return rec_path, csv_path


def _predictors(cfg: ExperimentConfig) -> tuple[dict, dict]:
    predictors, checksums = {}, {}
    for s in cfg.solvers:
        if s in LEARNED:
            predictors[s], checksums[s] = _load_predictor(cfg, s)
    return predictors, checksums


def _report_files(cfg: ExperimentConfig, report: Report, directory: Path, checksums: dict, **extra) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    curves = directory / "curves.csv"
    write_curves(report, curves)
    write_curves(report, directory / "summary.csv", cfg.checkpoints)
    _write_sidecar(directory / "report.json", cfg, model_sha256=checksums, problems=report.problems,
                   checkpoints=list(cfg.checkpoints), **extra)
    return curves


def cmd_compare(cfg: ExperimentConfig, predictors: dict | None = None, checksums: dict | None = None,
                directory: Path | None = None, **extra) -> Report:
    """Run every selected solver on the test split and write the NMSE curves."""
    if predictors is None:
        predictors, checksums = _predictors(cfg)
    _, test = _split(cfg, _load_images(cfg))
    if not test:
        raise ValueError("test split is empty")
    report = _evaluate(cfg, cfg.problem_config(), test, predictors)
    _report_files(cfg, report, directory or cfg.out_dir / "compare", checksums or {}, **extra)
    return report


def cmd_robustness(cfg: ExperimentConfig, sweep: str, values=None) -> dict[float, Report]:
    """Re-run the comparison at each sweep point with the same predictors, without retraining.

    ``rates`` sets the sampling rate, ``lambda`` multiplies the regularization
    weight and ``noise`` sets the measurement noise level (8-bit units).
    """
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")
    values = tuple(values) if values else SWEEPS[sweep]
    predictors, checksums = _predictors(cfg)
    reports = {}
    for v in values:
        if sweep == "rates":
            point = dataclasses.replace(cfg, rate=v)
        elif sweep == "lambda":
            point = dataclasses.replace(cfg, lam=cfg.lam * v)
        else:
            point = dataclasses.replace(cfg, noise_sigma=v)
        directory = cfg.out_dir / "robustness" / f"{sweep}_{v:g}"
        reports[v] = cmd_compare(point, predictors, checksums, directory, sweep=sweep, value=v)
    return reports


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--solver", choices=SOLVERS, action="append",
                        help="solver to run (repeatable; overrides the config's list)")
    common.add_argument("--iters", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="proxaccel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the image set")
    sub.add_parser("train", parents=[common], help="train stepsize predictors")
    solve = sub.add_parser("solve", parents=[common], help="recover one image")
    solve.add_argument("image", help="ground-truth PGM image")
    sub.add_parser("compare", parents=[common], help="NMSE curves on the test split")
    rob = sub.add_parser("robustness", parents=[common], help="comparison sweeps without retraining")
    rob.add_argument("sweep", choices=sorted(SWEEPS))
    rob.add_argument("--values", type=_floats, help="comma-separated sweep points")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        solvers = tuple(args.solver) if args.solver else None
        cfg = ExperimentConfig.from_file(args.config, seed=args.seed, out=args.out, iters=args.iters,
                                         solvers=solvers)
        if args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "train":
            for path in cmd_train(cfg):
                print(path)
        elif args.command == "solve":
            if len(cfg.solvers) != 1:
                raise ValueError("solve needs exactly one --solver")
            for path in cmd_solve(cfg, args.image, cfg.solvers[0]):
                print(path)
        elif args.command == "compare":
            report = cmd_compare(cfg)
            for s in report.curves:
                for k in cfg.checkpoints:
                    if k <= report.iters:
                        print(f"{s}@{k}: {report.at(s, k)[0]:.3f} dB")
        else:
            reports = cmd_robustness(cfg, args.sweep, args.values)
            for v, report in reports.items():
                print(f"{args.sweep}={v:g}: " + ", ".join(
                    f"{s}@{k} {report.at(s, k)[0]:.3f} dB" for s in report.curves for k in cfg.checkpoints
                    if k <= report.iters))
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        if args.verbose:
            log.exception("%s failed", args.command)
        print(f"proxaccel {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
