"""Command-line driver.

Exit codes: 0 success, 1 model or pipeline failure, 2 usage or I/O error.
Variable indices in every output are 1-based.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import em_mar, metrics, mnarz, ranking, simgen, sruw
from .core import CovForm, MaskedDataset, VariablePartition, load_csv, save_csv
from .em_mar import EmConfig
from .errors import ConfigError, DataError, MnarselError
from .penalized import PenaltyGrid
from .sruw import SelectionCache, SelectionConfig

EXIT_OK, EXIT_MODEL, EXIT_USAGE = 0, 1, 2
MECHANISMS = ("mar", "mnarz")
DESIGNS = {"dataset1": simgen.Design.DATASET1, "dataset2": simgen.Design.DATASET2,
           "mnarz_appendix": simgen.Design.MNARZ_APPENDIX}


class UsageError(MnarselError):
    code = "USAGE"


def fmt_set(idx) -> str:
    return ";".join(str(j + 1) for j in sorted(idx))


def parse_set(text: str) -> frozenset:
    text = text.strip()
    return frozenset(int(t) - 1 for t in text.split(";") if t.strip()) if text else frozenset()


def parse_int_range(text: str) -> tuple:
    """'2,3,4' or '2:4' (inclusive)."""
    try:
        if ":" in text:
            lo, hi = (int(t) for t in text.split(":"))
            vals = tuple(range(lo, hi + 1))
        else:
            vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"bad integer list {text!r}")
    return vals


def parse_grid(text: Optional[str]) -> Optional[PenaltyGrid]:
    """'l1,l2,.../r1,r2,...' or None for the data-driven default."""
    if not text:
        return None
    try:
        lams, rhos = text.split("/")
        return PenaltyGrid(tuple(float(v) for v in lams.split(",")), tuple(float(v) for v in rhos.split(",")))
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: {exc}") from None


def _write_rows(path: Optional[str], header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


# --------------------------------------------------------------------------
# truth sidecar


def save_truth(path, labels, part: Optional[VariablePartition], d: int) -> None:
    rows = [("label", i + 1, int(z)) for i, z in enumerate(labels)]
    if part is not None:
        for j in range(d):
            role = ("S" + ("R" if j in part.R else "")) if j in part.S else ("U" if j in part.U else "W")
            rows.append(("role", j + 1, role))
    _write_rows(str(path), ("field", "index", "value"), rows)


def load_truth(path):
    """(labels, partition or None) from a sidecar written by ``save_truth``."""
    labels, roles = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                i = int(row["index"]) - 1
                if row["field"] == "label":
                    labels[i] = int(row["value"])
                elif row["field"] == "role":
                    roles[i] = row["value"]
            except (KeyError, ValueError, TypeError):
                raise DataError(f"bad truth row {row}", code="PARSE") from None
    lab = np.array([labels[i] for i in sorted(labels)])
    if not roles:
        return lab, None
    pick = lambda tag: {j for j, r in roles.items() if tag in r}  # noqa: E731
    return lab, VariablePartition(pick("S"), pick("R"), pick("U"), pick("W"))


# --------------------------------------------------------------------------
# shared pipeline


@dataclass
class SelectionOutcome:
    spec: object
    part: VariablePartition
    crit: float
    scores: np.ndarray
    resp: np.ndarray
    imputed: np.ndarray
    seconds: float


def run_selection(data: MaskedDataset, mechanism: str, Ks, forms, c: int, grid, cfg: EmConfig) -> SelectionOutcome:
    t0 = time.perf_counter()
    sel = SelectionConfig(c=c)
    if mechanism == "mnarz":
        counts, n_mnar = mnarz.mnar_counts(data)
        cache = SelectionCache.for_data(data, cfg, counts, n_mnar)
        spec, part, fit = mnarz.select_model_mnarz(data, Ks, forms, grid, sel, cfg, cache=cache)
        theta = fit.theta
    else:
        cache = SelectionCache.for_data(data, cfg)
        spec, part, theta = sruw.select_model(data, Ks, forms, grid, sel, cfg, cache)
    crit = sruw.crit_bic(data, part, spec, cfg, cache)
    gmm = sruw.sruw_to_global_gmm(theta, part)
    if cache.cluster.mnar:
        res = cache.cluster.fit(part.S, spec.K, spec.m)
        mn = mnarz.MnarzParams(res.rho, frozenset(), frozenset(range(data.d)))
        resp = mnarz.responsibilities_mnarz(data, gmm, mn)
    else:
        resp = em_mar.e_step(data, gmm)
    imputed = em_mar.impute(data, gmm, resp)
    scores = cache.rankings[spec.K].scores if spec.K in cache.rankings else np.zeros(data.d, dtype=int)
    return SelectionOutcome(spec, part, crit, scores, resp, imputed, time.perf_counter() - t0)


def _cfg(args) -> EmConfig:
    return EmConfig(seed=args.seed, n_starts=args.n_starts)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    spec = simgen.SimSpec(DESIGNS[args.design], n=args.n, scenario=args.scenario,
                          sigma_scale=args.sigma_scale, seed=args.seed, D=args.D)
    sim = simgen.generate(spec)
    data = sim.data
    if args.mechanism != "none":
        data = simgen.apply_missingness(data, sim.labels, _mechanism(args.mechanism, args.rate, sim.labels),
                                        seed=args.seed + 1)
    save_csv(data, args.out)
    truth = args.truth or str(Path(args.out).with_suffix("")) + "_truth.csv"
    save_truth(truth, sim.labels, sim.truth, data.d)
    print(f"wrote {data.n}x{data.d} to {args.out} (missing rate {data.missing_rate:.4f}); truth in {truth}")
    return EXIT_OK


def _mechanism(name: str, rate: float, labels):
    if name == "mcar":
        return simgen.MCAR(rate)
    if name == "mar":
        return simgen.MAR(rate)
    if name == "mnarz":
        return simgen.MNARZ.from_rate(rate, int(np.max(labels)) + 1)
    raise UsageError(f"unknown mechanism {name!r}")


def cmd_fit(args) -> int:
    data = load_csv(args.data)
    cfg = _cfg(args)
    form = CovForm(args.form)
    if args.mechanism == "mnarz":
        fit = mnarz.em_fit_mnarz(data, args.K, form, cfg)
        resp, ll, rho = fit.responsibilities, fit.loglik, fit.mnarz.rho
    else:
        fit = em_mar.fit(data, args.K, form, cfg)
        resp, ll, rho = fit.responsibilities, fit.loglik, None
    rows = [(i + 1, int(k) + 1, *(_fmt(p) for p in resp[i])) for i, k in enumerate(resp.argmax(axis=1))]
    _write_rows(args.out, ("row", "cluster", *(f"t{k + 1}" for k in range(args.K))), rows)
    msg = f"loglik={ll:.6f}"
    if rho is not None:
        msg += " rho=" + ";".join(f"{r:.6g}" for r in rho)
    print(msg, file=sys.stderr)
    return EXIT_OK


def cmd_rank(args) -> int:
    data = load_csv(args.data)
    res = ranking.rank_variables(data, args.K, parse_grid(args.grid), cfg=_cfg(args))
    pos = {j: r for r, j in enumerate(res.order)}
    rows = [(j + 1, data.var_names[j], int(res.scores[j]), pos[j] + 1) for j in range(data.d)]
    _write_rows(args.out, ("variable", "name", "O_K", "rank"), rows)
    return EXIT_OK


SELECT_HEADER = ("K", "m", "r", "l", "S", "R", "U", "W", "crit_bic", "O_K")


def _selection_row(out: SelectionOutcome) -> list:
    s, p = out.spec, out.part
    return [s.K, s.m.value, s.r.value, s.l.value, fmt_set(p.S), fmt_set(p.R), fmt_set(p.U), fmt_set(p.W),
            _fmt(out.crit), ";".join(str(int(v)) for v in out.scores)]


def cmd_select(args) -> int:
    data = load_csv(args.data)
    out = run_selection(data, args.mechanism, parse_int_range(args.K_range), _forms(args.forms),
                        args.c, parse_grid(args.grid), _cfg(args))
    header, row = list(SELECT_HEADER), _selection_row(out)
    if args.record_time:
        header.append("seconds")
        row.append(_fmt(out.seconds))
    _write_rows(args.out, header, [row])
    return EXIT_OK


def _forms(text: str) -> tuple:
    try:
        return tuple(CovForm(t.strip().upper()) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad covariance forms {text!r}") from None


def cmd_evaluate(args) -> int:
    labels, truth = load_truth(args.truth)
    with open(args.labels, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        pred = np.array([int(r["cluster"]) for r in rows])
    except (KeyError, ValueError):
        raise DataError("labels file needs a 'cluster' column", code="PARSE") from None
    out = [("ari", _fmt(metrics.ari(labels, pred)))]
    if args.report:
        with open(args.report, newline="", encoding="utf-8") as fh:
            rep = next(csv.DictReader(fh))
        K0 = int(labels.max()) + 1
        S0 = truth.S if truth is not None else frozenset()
        ok_K, ok_S = metrics.selection_accuracy((int(rep["K"]), parse_set(rep["S"])), (K0, S0))
        out += [("correct_K", int(ok_K)), ("correct_S", int(ok_S))]
    _write_rows(args.out, ("metric", "value"), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentConfig:
    design: str = "dataset1"
    n: int = 2000
    scenario: int = 8
    sigma_scale: float = 1.0
    D: int = 6
    mechanisms: tuple = ("mar", "mnarz")
    rates: tuple = (0.05, 0.1, 0.2, 0.3, 0.5)
    replications: int = 20
    seed: int = 0
    K_range: tuple = (2, 3, 4)
    forms: tuple = (CovForm.FULL_FREE,)
    c: int = 2
    n_starts: int = 5
    grid: Optional[PenaltyGrid] = None
    record_time: bool = False
    extra: dict = field(default_factory=dict)


def _split(v: str) -> list:
    return [t.strip() for t in v.split(",") if t.strip()]


_PARSERS = {
    "design": lambda v: v.strip().lower(),
    "n": int, "scenario": int, "D": int, "seed": int, "c": int, "n_starts": int,
    "replications": int,
    "sigma_scale": float,
    "mechanisms": lambda v: tuple(t.lower() for t in _split(v)),
    "rates": lambda v: tuple(float(t) for t in _split(v)),
    "K_range": parse_int_range,
    "forms": _forms,
    "grid": parse_grid,
    "record_time": lambda v: {"1": True, "true": True, "yes": True, "0": False, "false": False,
                              "no": False}[v.strip().lower()],
}


def parse_config(text: str) -> ExperimentConfig:
    """Line-oriented key=value pairs; '#' starts a comment."""
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if not val:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        try:
            kw[key] = _PARSERS[key](val)
        except (ValueError, KeyError, MnarselError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(**kw)
    if cfg.design not in DESIGNS:
        raise ConfigError(f"unknown design {cfg.design!r}")
    if cfg.replications < 1:
        raise ConfigError("replications must be >= 1")
    if not cfg.mechanisms or set(cfg.mechanisms) - set(MECHANISMS):
        raise ConfigError(f"mechanisms must be drawn from {MECHANISMS}")
    if not cfg.rates or any(not 0 <= r < 1 for r in cfg.rates):
        raise ConfigError("rates must lie in [0, 1)")
    return cfg


EXPERIMENT_HEADER = ("design", "scenario", "mechanism", "rate", "replication", "seed", "K", "S",
                     "ari", "wnrmse", "correct_K", "correct_S")


def replication_seed(base: int, rep: int) -> int:
    return int(np.random.SeedSequence([base, rep]).generate_state(1, dtype=np.uint64)[0])


def run_replication(cfg: ExperimentConfig, mechanism: str, rate: float, rep: int) -> list:
    seed = replication_seed(cfg.seed, rep)
    spec = simgen.SimSpec(DESIGNS[cfg.design], n=cfg.n, scenario=cfg.scenario,
                          sigma_scale=cfg.sigma_scale, seed=seed % 2**63, D=cfg.D)
    sim = simgen.generate(spec)
    data = sim.data
    if cfg.design != "mnarz_appendix" and rate > 0:
        data = simgen.apply_missingness(data, sim.labels, _mechanism(mechanism, rate, sim.labels),
                                        seed=replication_seed(seed % 2**63, 1))
    row = [cfg.design, cfg.scenario, mechanism, _fmt(rate), rep + 1, seed]
    em_cfg = EmConfig(seed=seed % 2**32, n_starts=cfg.n_starts)
    try:
        out = run_selection(data, mechanism, cfg.K_range, cfg.forms, cfg.c, cfg.grid, em_cfg)
    except MnarselError as exc:
        logging.getLogger(__name__).warning("replication %d failed: %s", rep + 1, exc)
        row += ["", "", "nan", "nan", 0, 0] + (["nan"] if cfg.record_time else [])
        return row
    K0 = int(sim.labels.max()) + 1
    S0 = sim.truth.S if sim.truth is not None else frozenset()
    ok_K, ok_S = metrics.selection_accuracy((out.spec.K, out.part.S), (K0, S0))
    ari = metrics.ari(sim.labels, out.resp.argmax(axis=1))
    try:
        w = metrics.grouped_nrmse(sim.complete, out.imputed, data.mask, sim.labels)
    except MnarselError:
        w = float("nan")
    row += [out.spec.K, fmt_set(out.part.S), _fmt(ari), _fmt(w), int(ok_K), int(ok_S)]
    if cfg.record_time:
        row.append(_fmt(out.seconds))
    return row


def _run_job(job):
    return run_replication(*job)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list:
    work = [(cfg, mech, rate, rep) for mech in cfg.mechanisms for rate in cfg.rates
            for rep in range(cfg.replications)]
    if jobs <= 1:
        return [_run_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map preserves submission order, so output order is deterministic
        return list(pool.map(_run_job, work))


def cmd_experiment(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(str(exc), code="IO") from None
    cfg = parse_config(text)
    rows = run_experiment(cfg, args.jobs)
    header = list(EXPERIMENT_HEADER) + (["seconds"] if cfg.record_time else [])
    _write_rows(args.out, header, rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"USAGE: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mnarsel", description="Clustering with variable-role selection under MNARz missingness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(q, K=False):
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--n-starts", type=int, default=5)
        q.add_argument("--out", default="-", help="output CSV ('-' for stdout)")
        if K:
            q.add_argument("--K", type=int, required=True)

    q = sub.add_parser("simulate", help="generate a synthetic dataset and its truth sidecar")
    q.add_argument("--design", choices=sorted(DESIGNS), required=True)
    q.add_argument("--n", type=int, default=2000)
    q.add_argument("--scenario", type=int, default=8)
    q.add_argument("--sigma-scale", type=float, default=1.0)
    q.add_argument("--D", type=int, default=6)
    q.add_argument("--mechanism", choices=("none", "mcar", "mar", "mnarz"), default="none")
    q.add_argument("--rate", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--truth", help="truth sidecar path (default: <out>_truth.csv)")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("fit", help="fit a mixture to all variables")
    q.add_argument("--data", required=True)
    q.add_argument("--form", type=str.upper, choices=[f.value for f in CovForm], default="FULL_FREE")
    q.add_argument("--mechanism", choices=MECHANISMS, default="mar")
    common(q, K=True)
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("rank", help="rank variables by penalized-mean persistence")
    q.add_argument("--data", required=True)
    q.add_argument("--grid", help="'l1,l2,.../r1,r2,...' (default: data-driven)")
    common(q, K=True)
    q.set_defaults(func=cmd_rank)

    q = sub.add_parser("select", help="choose K, the covariance forms and the variable roles")
    q.add_argument("--data", required=True)
    q.add_argument("--mechanism", choices=MECHANISMS, default="mar")
    q.add_argument("--K-range", dest="K_range", default="2,3,4")
    q.add_argument("--forms", default="FULL_FREE")
    q.add_argument("--c", type=int, default=2)
    q.add_argument("--grid")
    q.add_argument("--record-time", action="store_true")
    common(q)
    q.set_defaults(func=cmd_select)

    q = sub.add_parser("evaluate", help="score predicted labels (and a selection report) against the truth")
    q.add_argument("--truth", required=True)
    q.add_argument("--labels", required=True, help="CSV with a 'cluster' column (as written by fit)")
    q.add_argument("--report", help="selection report written by select")
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("experiment", help="run a replication sweep from a key=value config")
    q.add_argument("--config", required=True)
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_experiment)
    return p


_USAGE_CODES = {"CONFIG_PARSE", "USAGE", "IO", "PARSE", "RAGGED", "EMPTY", "BAD_SCENARIO", "BAD_D"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"IO: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MnarselError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE if exc.code in _USAGE_CODES else EXIT_MODEL
    except ValueError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
