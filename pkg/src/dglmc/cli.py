"""Experiment runner: config parsing, synthetic data, shard I/O and subcommands.

Configuration files hold ``section.key = value`` lines; ``#`` starts a
comment. Every CSV written uses ``\\n`` line endings and 17 significant
digits so floats round-trip exactly.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (calibrate_dsgld_step, calibrate_mala_step, exact_gaussian_posterior,
                        gaussian_fit, gaussian_w2, GaussianLaw, run_dsgld, run_mala)
from .diagnostics import hpd_error, hpd_threshold, iat, summarize
from .engine import ClusterProfile, DivergenceError, RunConfig, run_dglmc
from .kernels import make_hyperparams
from .model import (NegLogPosterior, ShardedDataset, find_mode, gaussian_model,
                    logistic_model_from_dataset, quadratic_potential)
from .tuning import axda_bias_bound, check_contraction, guideline_hyperparams, mixing_budget

log = logging.getLogger("dglmc")

FLOAT_FMT = "%.17g"


def fmt(value) -> str:
    """Render a value for CSV output; floats keep 17 significant digits."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % float(value)
    return str(value)


def _parse_list(text, cast):
    text = text.strip()
    if not text:
        return []
    return [cast(t.strip()) for t in text.split(",")]


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (kind, default). Kinds: int, float, str, bool, ints, floats, strs.
SCHEMA = {
    "model.kind": ("str", "gaussian"),
    "model.dim": ("int", 2),
    "model.n": ("int", 20000),
    "model.shards": ("int", 10),
    "model.prior_var": ("float", 4.0),
    "model.like_var": ("float", 1.0),
    "model.prior_prec": ("float", 1.0),
    "model.data_dir": ("str", ""),
    "model.data_seed": ("int", 0),
    "cluster.tau": ("floats", [1.0]),
    "cluster.comm_cost": ("float", 0.0),
    "sampler.name": ("str", "dglmc"),
    "sampler.rho": ("floats", []),
    "sampler.gamma": ("floats", []),
    "sampler.c_gamma": ("float", 0.25),
    "sampler.n_local": ("float", 0.0),
    "sampler.dsgld_step": ("float", 0.0),
    "sampler.mala_step": ("float", 0.0),
    "sampler.batch_frac": ("float", 0.1),
    "sampler.consensus": ("str", "relay"),
    "run.iters": ("int", 10000),
    "run.burn_in": ("int", 1000),
    "run.thin": ("int", 1),
    "run.seed": ("int", 0),
    "output.dir": ("str", "out"),
    "bounds.dims": ("ints", [8, 16, 32, 64]),
    "bounds.eps": ("floats", [0.1]),
    "bounds.workers": ("int", 1),
    "bounds.curvature": ("float", 1.0),
    "compare.samplers": ("strs", ["dglmc", "dsgld", "mala"]),
    "compare.alpha": ("float", 0.05),
    "compare.reference_iters": ("int", 0),
    "compare.reference_eta": ("float", math.nan),
}

_CAST = {
    "int": int, "float": float, "str": str, "bool": _parse_bool,
    "ints": lambda t: _parse_list(t, int),
    "floats": lambda t: _parse_list(t, float),
    "strs": lambda t: _parse_list(t, str),
}


def _render(kind, value) -> str:
    if kind in ("ints", "floats", "strs"):
        return ", ".join(fmt(v) for v in value)
    return fmt(value)


@dataclass
class ExperimentConfig:
    """Typed view over ``section.key`` settings with schema defaults."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ValueError(f"unknown config key {k!r}")
            full[k] = v
        self.values = full
        self.check()

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        if key not in SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        self.values[key] = value
        self.check()

    def check(self):
        v = self.values
        if v["model.kind"] not in ("gaussian", "logistic"):
            raise ValueError("model.kind must be 'gaussian' or 'logistic'")
        if v["sampler.name"] not in ("dglmc", "dsgld", "mala"):
            raise ValueError("sampler.name must be dglmc, dsgld or mala")
        for name in v["compare.samplers"]:
            if name not in ("dglmc", "dsgld", "mala"):
                raise ValueError(f"unknown sampler {name!r} in compare.samplers")
        if v["sampler.consensus"] not in ("relay", "average"):
            raise ValueError("sampler.consensus must be 'relay' or 'average'")
        for key in ("model.dim", "model.n", "model.shards", "run.iters", "run.thin",
                    "bounds.workers"):
            if v[key] < 1:
                raise ValueError(f"{key} must be >= 1")
        if v["model.n"] < v["model.shards"]:
            raise ValueError("model.n must be at least model.shards")
        for key in ("model.prior_var", "model.like_var", "model.prior_prec", "bounds.curvature"):
            if not v[key] > 0:
                raise ValueError(f"{key} must be positive")
        if any(not t > 0 for t in v["cluster.tau"]) or v["cluster.comm_cost"] < 0:
            raise ValueError("cluster.tau must be positive and cluster.comm_cost nonnegative")
        if any(not r > 0 for r in v["sampler.rho"]) or any(not g > 0 for g in v["sampler.gamma"]):
            raise ValueError("sampler.rho and sampler.gamma entries must be positive")
        if not 0.1 <= v["sampler.c_gamma"] <= 0.5:
            raise ValueError("sampler.c_gamma must lie in [0.1, 0.5]")
        if not 0 < v["sampler.batch_frac"] <= 1:
            raise ValueError("sampler.batch_frac must lie in (0, 1]")
        if not 0 <= v["run.burn_in"] < v["run.iters"]:
            raise ValueError("run.burn_in must lie in [0, run.iters)")
        if not 0 < v["compare.alpha"] < 1:
            raise ValueError("compare.alpha must lie in (0, 1)")
        if any(d < 1 for d in v["bounds.dims"]) or any(not e > 0 for e in v["bounds.eps"]):
            raise ValueError("bounds.dims must be >= 1 and bounds.eps positive")

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'section.key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in SCHEMA:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            try:
                values[key] = _CAST[SCHEMA[key][0]](val)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
        return cls(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(SCHEMA[k][0], self.values[k])}\n" for k in SCHEMA)


# ---------------------------------------------------------------- data


def generate_synthetic(kind: str, dims: int, n: int, seed: int, shards: int,
                       out_dir=None, like_var: float = 1.0) -> ShardedDataset:
    """Draw a synthetic dataset and optionally write it as shard CSVs.

    Gaussian toy rows are ``theta_gen + sqrt(like_var) * N(0, I)`` with
    ``theta_gen ~ N(0, I)``. Logistic rows are ``[label, x]`` with standard
    normal features and labels drawn from the logistic law at a unit-norm
    ``theta_gen``. Output depends only on the arguments.
    """
    if kind not in ("gaussian", "logistic"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    if n < shards or shards < 1:
        raise ValueError(f"need n >= shards >= 1, got n={n}, shards={shards}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3,))))
    if kind == "gaussian":
        theta_gen = rng.standard_normal(dims)
        rows = theta_gen + math.sqrt(like_var) * rng.standard_normal((n, dims))
    else:
        theta_gen = rng.standard_normal(dims)
        theta_gen /= np.linalg.norm(theta_gen)
        x = rng.standard_normal((n, dims))
        prob = 1.0 / (1.0 + np.exp(-(x @ theta_gen)))
        y = (rng.random(n) < prob).astype(float)
        rows = np.column_stack([y, x])
    data = ShardedDataset.split_even(rows, shards, kind, theta_gen)
    if out_dir is not None:
        write_shards(data, out_dir)
    return data


def _write_csv(path, header, rows):
    np.savetxt(path, np.atleast_2d(rows), fmt=FLOAT_FMT, delimiter=",", header=",".join(header),
               comments="", newline="\n")


def write_shards(data: ShardedDataset, out_dir) -> None:
    """Write ``shard_<i>.csv`` files plus ``theta_gen.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = data.width
    if data.kind == "gaussian":
        header = [f"y_{j + 1}" for j in range(width)]
    else:
        header = ["label"] + [f"x_{j + 1}" for j in range(width - 1)]
    for i, block in enumerate(data.shards):
        _write_csv(out / f"shard_{i}.csv", header, block)
    if data.theta_gen is not None:
        gen = np.asarray(data.theta_gen)
        _write_csv(out / "theta_gen.csv", [f"theta_{j + 1}" for j in range(gen.size)], gen)


def read_shards(in_dir) -> ShardedDataset:
    """Read shards written by :func:`write_shards`."""
    src = Path(in_dir)
    files = sorted(src.glob("shard_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no shard_<i>.csv files in {src}")
    header = files[0].read_text().split("\n", 1)[0]
    kind = "logistic" if header.startswith("label") else "gaussian"
    shards = [np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2) for f in files]
    gen_path = src / "theta_gen.csv"
    gen = np.loadtxt(gen_path, delimiter=",", skiprows=1, ndmin=1) if gen_path.exists() else None
    return ShardedDataset(shards, kind, gen)


# ---------------------------------------------------------------- model setup


@dataclass
class Experiment:
    """Everything built from a config: data, potentials and cluster."""

    data: ShardedDataset
    specs: list
    profile: ClusterProfile
    exact: GaussianLaw | None
    source: str


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    if cfg["model.data_dir"]:
        data = read_shards(cfg["model.data_dir"])
        source = f"files:{cfg['model.data_dir']}"
        if data.kind != cfg["model.kind"]:
            raise ValueError(f"data in {cfg['model.data_dir']} is {data.kind}, "
                             f"config says {cfg['model.kind']}")
    else:
        data = generate_synthetic(cfg["model.kind"], cfg["model.dim"], cfg["model.n"],
                                  cfg["model.data_seed"], cfg["model.shards"],
                                  like_var=cfg["model.like_var"])
        source = f"synthetic:seed={cfg['model.data_seed']}"
    b = data.n_shards
    exact = None
    if data.kind == "gaussian":
        d = data.width
        prior = GaussianLaw(np.zeros(d), cfg["model.prior_var"] * np.eye(d))
        cov_like = cfg["model.like_var"] * np.eye(d)
        specs = gaussian_model(prior.mean, prior.cov, cov_like, data)
        exact = exact_gaussian_posterior(prior, cov_like, data.stacked())
    else:
        specs = logistic_model_from_dataset(data, cfg["model.prior_prec"])
    tau = cfg["cluster.tau"]
    tau = np.full(b, tau[0]) if len(tau) == 1 else np.asarray(tau, dtype=float)
    if tau.shape[0] != b:
        raise ValueError(f"cluster.tau has {tau.shape[0]} entries for {b} workers")
    return Experiment(data, specs, ClusterProfile(tau, cfg["cluster.comm_cost"]), exact, source)


def build_hyper(cfg: ExperimentConfig, exp: Experiment, override: bool = False):
    """Guideline hyperparameters unless ``sampler.rho``/``sampler.gamma`` are set."""
    specs = exp.specs
    n_avg = cfg["sampler.n_local"] or None
    guide = guideline_hyperparams(specs, cfg["sampler.c_gamma"], exp.profile, n_avg)
    rho = cfg["sampler.rho"] or guide.rho
    gamma = cfg["sampler.gamma"] or None
    if gamma is None:
        if not cfg["sampler.rho"]:
            return guide
        big_m = np.array([s.m_upper for s in specs])
        r = np.broadcast_to(np.asarray(rho, dtype=float), (len(specs),))
        gamma = cfg["sampler.c_gamma"] * r / (r * big_m + 1.0)
    return make_hyperparams(specs, rho, gamma, guide.n_local, override=override)


def run_config(cfg: ExperimentConfig) -> RunConfig:
    return RunConfig(cfg["run.iters"], cfg["run.burn_in"], cfg["run.thin"], cfg["run.seed"])


def _write_table(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------- commands


def _run_sampler(name, cfg, exp, override, hyper=None):
    rc = run_config(cfg)
    if name == "dglmc":
        hyper = hyper or build_hyper(cfg, exp, override)
        return run_dglmc(exp.specs, hyper, rc, exp.profile, override=override)
    if name == "mala":
        target = NegLogPosterior(exp.specs)
        step = cfg["sampler.mala_step"]
        if not step:
            step, acc = calibrate_mala_step(target, seed=cfg["run.seed"])
            log.info("MALA step calibrated to %.6g (pilot acceptance %.3f)", step, acc)
        rep = run_mala(target, step, rc, profile=exp.profile)
        rep.diagnostics["step"] = step
        return rep
    step = cfg["sampler.dsgld_step"]
    if not step:
        raise ValueError("sampler.dsgld_step must be set for a standalone D-SGLD run")
    n_local = int(cfg["sampler.n_local"] or 1)
    rep = run_dsgld(exp.specs, step, cfg["sampler.batch_frac"], n_local, rc,
                    cfg["sampler.consensus"], exp.profile)
    rep.diagnostics["step"] = step
    return rep


def cmd_run(cfg: ExperimentConfig, override: bool = False) -> int:
    """Run one sampler and write ``theta_chain.csv``, ``report.csv`` and ``wall.txt``."""
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    exp = build_experiment(cfg)
    rep = _run_sampler(cfg["sampler.name"], cfg, exp, override)
    d = rep.theta_samples.shape[1]
    rows = np.column_stack([rep.kept_iters, rep.theta_samples])
    header = ["iter"] + [f"theta_{j + 1}" for j in range(d)]
    _write_table(out / "theta_chain.csv", header, [[int(r[0])] + list(r[1:]) for r in rows])

    report = {"sampler": rep.sampler, "data_source": exp.source, "iters": rep.iter_count,
              "burn_in": cfg["run.burn_in"], "thin": cfg["run.thin"], "seed": cfg["run.seed"],
              "n_kept": rep.theta_samples.shape[0], "wall_model": rep.wall_model}
    if rep.hyper is not None:
        report["validated"] = rep.hyper.validated
        for i in range(rep.hyper.n_workers):
            report[f"rho_{i + 1}"] = float(rep.hyper.rho[i])
            report[f"gamma_{i + 1}"] = float(rep.hyper.gamma[i])
            report[f"n_local_{i + 1}"] = int(rep.hyper.n_local[i])
    if "step" in rep.diagnostics:
        report["step"] = float(rep.diagnostics["step"])
    if rep.acceptance_rate is not None:
        report["acceptance_rate"] = rep.acceptance_rate
    if rep.theta_samples.shape[0] >= 4:
        report.update(summarize(rep.theta_samples))
    if exp.exact is not None:
        for j in range(d):
            report[f"exact_mean_{j + 1}"] = float(exp.exact.mean[j])
    if exp.data.theta_gen is not None:
        for j, v in enumerate(np.atleast_1d(exp.data.theta_gen)):
            report[f"theta_gen_{j + 1}"] = float(v)
    _write_table(out / "report.csv", ["key", "value"], report.items())
    (out / "wall.txt").write_text(fmt(rep.wall_model) + "\n")
    return 0


def bounds_rows(cfg: ExperimentConfig):
    """One row per ``(d, eps)`` on an isotropic quadratic model."""
    b = cfg["bounds.workers"]
    curv = cfg["bounds.curvature"]
    header = ["d", "eps", "kappa_gamma", "r_term", "contraction_ok", "w2_bias_axda", "rho_eps",
              "gamma_eps", "n_local_eps", "n_eps", "gradient_evals", "reason"]
    rows = []
    for d in cfg["bounds.dims"]:
        specs = [quadratic_potential(curv * np.eye(d), np.zeros(d)) for _ in range(b)]
        n_avg = cfg["sampler.n_local"] or None
        hyper = guideline_hyperparams(specs, cfg["sampler.c_gamma"], n_avg=n_avg)
        cr = check_contraction(specs, hyper)
        bias = axda_bias_bound(specs, hyper.rho)
        for eps in cfg["bounds.eps"]:
            mb = mixing_budget(specs, eps)
            rows.append([d, float(eps), cr.kappa_gamma, cr.r_term, cr.contraction_ok, bias.value,
                         mb.rho_eps, mb.gamma_eps, mb.n_local_eps, mb.n_eps, mb.gradient_evals,
                         bias.reason])
    return header, rows


def cmd_bounds(cfg: ExperimentConfig) -> int:
    """Write ``bounds.csv``."""
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    header, rows = bounds_rows(cfg)
    _write_table(out / "bounds.csv", header, rows)
    return 0


def _reference_eta(cfg, exp, alpha, target):
    eta = cfg["compare.reference_eta"]
    if not math.isnan(eta):
        return eta, None
    iters = cfg["compare.reference_iters"] or cfg["run.iters"]
    step = cfg["sampler.mala_step"]
    if not step:
        step, acc = calibrate_mala_step(target, seed=cfg["run.seed"] + 1)
        log.info("reference MALA step calibrated to %.6g (pilot acceptance %.3f)", step, acc)
    rc = RunConfig(iters, min(cfg["run.burn_in"], iters - 1), 1, cfg["run.seed"] + 1)
    ref = run_mala(target, step, rc, profile=exp.profile)
    ref.diagnostics["step"] = step
    return hpd_threshold(target.values(ref.theta_samples), alpha), ref


def cmd_compare(cfg: ExperimentConfig, override: bool = False) -> int:
    """Write ``compare.csv`` with IAT, HPD relative error and modelled wall time per sampler."""
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    exp = build_experiment(cfg)
    target = NegLogPosterior(exp.specs)
    alpha = cfg["compare.alpha"]
    names = cfg["compare.samplers"]
    eta_true, ref = _reference_eta(cfg, exp, alpha, target)
    reference_law = exp.exact
    if reference_law is None and ref is not None:
        reference_law = gaussian_fit(ref.theta_samples)

    hyper = build_hyper(cfg, exp, override)
    reports = {}
    if "dglmc" in names or ("dsgld" in names and not cfg["sampler.dsgld_step"]):
        reports["dglmc"] = run_dglmc(exp.specs, hyper, run_config(cfg), exp.profile,
                                     override=override)
    if "dsgld" in names:
        n_local = int(round(float(np.mean(hyper.n_local))))
        step = cfg["sampler.dsgld_step"]
        if not step:
            if reference_law is None:
                raise ValueError("D-SGLD calibration needs a reference law")
            target_w2 = gaussian_w2(gaussian_fit(reports["dglmc"].theta_samples), reference_law)
            top = 1.0 / float(np.linalg.eigvalsh(target.hess(find_mode(exp.specs)))[-1])
            grid = top * 4.0 ** -np.arange(0, 8)
            step, w2 = calibrate_dsgld_step(exp.specs, reference_law, target_w2,
                                            cfg["sampler.batch_frac"], n_local, run_config(cfg),
                                            grid, cfg["sampler.consensus"])
            log.info("D-SGLD step calibrated to %.6g (W2 %.3g vs DG-LMC %.3g)", step, w2, target_w2)
        rep = run_dsgld(exp.specs, step, cfg["sampler.batch_frac"], n_local, run_config(cfg),
                        cfg["sampler.consensus"], exp.profile)
        rep.diagnostics["step"] = step
        reports["dsgld"] = rep
    if "mala" in names:
        if ref is not None:
            reports["mala"] = ref
        else:
            reports["mala"] = _run_sampler("mala", cfg, exp, override)

    d = exp.specs[0].dim_in
    header = ["sampler", "step"] + [f"iat_{j + 1}" for j in range(d)] + \
        ["iat_max", "eta_alpha", "hpd_rel_error", "w2_gauss_fit", "wall_model"]
    rows = []
    for name in names:
        rep = reports[name]
        tau = iat(rep.theta_samples)
        hpd = hpd_error(rep.theta_samples, target, alpha, eta_true)
        w2 = None if reference_law is None else \
            gaussian_w2(gaussian_fit(rep.theta_samples), reference_law)
        rows.append([name, rep.diagnostics.get("step")] + list(tau) +
                    [float(tau.max()), hpd.eta_alpha, hpd.rel_error, w2, rep.wall_model])
    _write_table(out / "compare.csv", header, rows)
    return 0


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dglmc", description="Distributed Langevin-within-Gibbs "
                                     "sampler: data generation, runs, bounds and comparisons.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write synthetic shard CSVs"),
                            ("run", "run one sampler"),
                            ("bounds", "tabulate convergence and bias bounds"),
                            ("compare", "compare samplers on one model")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a 'section.key = value' file")
        p.add_argument("--seed", type=int, help="overrides run.seed (and model.data_seed for "
                       "generate)")
        p.add_argument("--out", help="overrides output.dir")
        p.add_argument("--override-validation", action="store_true",
                       help="run even if a step size breaks the stability constraint")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.out:
            cfg.set("output.dir", args.out)
        if args.seed is not None:
            key = "model.data_seed" if args.command == "generate" else "run.seed"
            cfg.set(key, args.seed)
        if args.command == "generate":
            generate_synthetic(cfg["model.kind"], cfg["model.dim"], cfg["model.n"],
                               cfg["model.data_seed"], cfg["model.shards"], cfg["output.dir"],
                               cfg["model.like_var"])
            return 0
        if args.command == "run":
            return cmd_run(cfg, args.override_validation)
        if args.command == "bounds":
            return cmd_bounds(cfg)
        return cmd_compare(cfg, args.override_validation)
    except (ValueError, OSError, DivergenceError) as exc:
        msg = str(exc)
        if msg.startswith("step size above"):
            msg += " (pass --override-validation to run anyway)"
        print(f"dglmc {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["ExperimentConfig", "generate_synthetic", "write_shards", "read_shards",
           "build_experiment", "build_hyper", "cmd_run", "cmd_bounds", "cmd_compare",
           "bounds_rows", "main", "fmt"]
