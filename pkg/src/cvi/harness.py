"""Experiment orchestration: config parsing, seeded training runs, replicate
suites with JSON-lines persistence, the SNR sweep, and the gradient audit.

A run is fully determined by (config, seed): the seed expands into a 128-bit
key from which task data, parameter initialization and every per-step sample
key are derived. Replicate seeds for a suite come from one seed sequence per
base seed, so a rerun reproduces the log except for wall-clock fields.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .core import (
    ConfigurationError,
    ParamVector,
    adam_update,
    finite_diff_directional,
    fold_in,
    key_from_seed,
    step_key_words,
)
from .distributions import build_family, default_family_for_task, log_prob_batch, sample
from .distributions.families import VariationalFamily
from .metrics import grad_snr, metric_report
from .models import REGENERATED_TASKS, ModelTask, make_task
from .objectives import (
    NegativeSpec,
    ObjectiveSpec,
    build_loss,
    build_value_and_grad,
    frozen_loss_for_fd,
)
from .reference import ReferencePosterior, cached_reference

THIN_INTERVAL = 100


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_SECTIONS = {
    "task": {"name", "dim", "d", "p", "n"},
    "family": {"name", "dim", "n_layers", "n_bins"},
    "objective": {"kind", "k", "alpha", "negative"},
    "train": {"steps", "lr", "replicates", "base_seed", "jobs"},
    "reference": {"n_ref", "n_prop", "n_chains", "n_steps", "seed"},
    "output": {"runs", "summary", "cache_dir"},
}


@dataclass
class ExperimentConfig:
    task: dict
    family: dict | None = None
    objective: dict = field(default_factory=lambda: {"kind": "softcvi"})
    steps: int = 50_000
    lr: float = 1e-3
    replicates: int = 10
    base_seed: int = 0
    jobs: int = 1
    reference: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = {k: v for k, v in raw.items() if v is not None}
        for section, content in raw.items():
            if section not in _SECTIONS:
                raise ConfigurationError(f"unknown config section [{section}]")
            if not isinstance(content, dict):
                raise ConfigurationError(f"config section [{section}] must be a table")
            for key in content:
                if key not in _SECTIONS[section]:
                    raise ConfigurationError(f"unknown config field {section}.{key}")
        task = raw.get("task")
        if not task or "name" not in task:
            raise ConfigurationError("config needs task.name")
        train = raw.get("train", {})
        cfg = cls(
            task=dict(task),
            family=dict(raw["family"]) if raw.get("family") else None,
            objective=dict(raw.get("objective", {"kind": "softcvi"})),
            steps=int(train.get("steps", 50_000)),
            lr=float(train.get("lr", 1e-3)),
            replicates=int(train.get("replicates", 10)),
            base_seed=int(train.get("base_seed", 0)),
            jobs=int(train.get("jobs", 1)),
            reference=dict(raw.get("reference", {})),
            output=dict(raw.get("output", {})),
        )
        if cfg.steps < 0:
            raise ConfigurationError("train.steps must be >= 0")
        cfg.objective_spec()  # validate eagerly
        return cfg

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def objective_spec(self) -> ObjectiveSpec:
        obj = dict(self.objective)
        kind = obj.pop("kind", "softcvi")
        k = int(obj.pop("k", 8))
        alpha = float(obj.pop("alpha", 0.75))
        negative = obj.pop("negative", "proposal-power")
        if obj:
            raise ConfigurationError(f"unknown config field objective.{sorted(obj)[0]}")
        if kind == "softcvi":
            return ObjectiveSpec(kind, k, NegativeSpec(negative, alpha))
        return ObjectiveSpec(kind, k)

    def resolved(self) -> dict:
        return {
            "task": self.task,
            "family": self.family,
            "objective": self.objective,
            "train": {
                "steps": self.steps,
                "lr": self.lr,
                "replicates": self.replicates,
                "base_seed": self.base_seed,
            },
            "reference": self.reference,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_task(config: ExperimentConfig, seed: int) -> ModelTask:
    """Regenerating tasks draw fresh data from the run seed; fixed tasks do not."""
    opts = dict(config.task)
    name = opts.pop("name")
    if name in REGENERATED_TASKS:
        key = fold_in(key_from_seed(seed), 0xDA7A)
        return make_task(name, key, **opts)
    return make_task(name, **opts)


def family_for(config: ExperimentConfig, task: ModelTask) -> VariationalFamily:
    if config.family is None:
        return default_family_for_task(task)
    return build_family(dict(config.family), task=None if "dim" in config.family else task)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    status: str
    steps: int
    loss_trace: list
    diagnostics_trace: dict
    final_phi: list
    wall_seconds: float
    lr_final: float
    metrics: dict | None = None
    error: str | None = None
    config: dict | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def _chunk_runner(task, family, spec):
    """scan over THIN_INTERVAL steps; carries (phi, m, v, t), takes lr + keys.

    Compiled once per (task, family, objective) and cached on the family, so
    replicate sweeps over a fixed observation share the compilation.
    """

    def builder():
        vg = jax.value_and_grad(build_loss(task, family, spec), has_aux=True)

        def step(carry, key_words):
            phi, m, v, t, lr = carry
            (_, diag), grad = vg(phi, jax.random.wrap_key_data(key_words))
            m, v, t, phi = adam_update(m, v, t, grad, phi, lr, 0.9, 0.999, 1e-8)
            return (phi, m, v, t, lr), diag

        def chunk(phi, m, v, t, lr, keys):
            (phi, m, v, t, _), diags = jax.lax.scan(step, (phi, m, v, t, lr), keys)
            last = {k: val[-1] for k, val in diags.items()}
            return phi, m, v, t, last

        return (jax.jit(chunk), task)

    return family._get(("chunk_runner", id(task), spec), builder)[0]


def train(config: ExperimentConfig, seed: int, task: ModelTask | None = None,
          family: VariationalFamily | None = None) -> RunRecord:
    """Run the configured estimator for config.steps Adam updates.

    Deterministic given (config, seed). A non-finite loss or parameter vector
    triggers one retry from the last finite checkpoint with the learning rate
    halved; a second failure marks the run as failed.
    """
    t_start = time.perf_counter()
    key = key_from_seed(seed)
    if task is None:
        task = build_task(config, seed)
    if family is None:
        family = family_for(config, task)
    spec = config.objective_spec()
    phi0 = family.init_params(fold_in(key, 0x1217))

    phi = jnp.asarray(phi0.values)
    m = jnp.zeros_like(phi)
    v = jnp.zeros_like(phi)
    t = 0
    lr = config.lr

    loss_trace: list[float] = []
    diag_trace: dict[str, list] = {}
    runner = _chunk_runner(task, family, spec) if config.steps > 0 else None
    train_key = fold_in(key, 0x57E9)

    step_done = 0
    retried = False
    checkpoint = (phi, m, v, t)
    while step_done < config.steps:
        n = min(THIN_INTERVAL, config.steps - step_done)
        keys = step_key_words(train_key, n, offset=step_done)
        new_phi, new_m, new_v, new_t, last_diag = runner(
            phi, m, v, t, lr, jnp.asarray(keys)
        )
        loss = float(last_diag["loss"])
        if not (np.isfinite(loss) and bool(jnp.all(jnp.isfinite(new_phi)))):
            if retried:
                return RunRecord(
                    config_hash=config.config_hash(),
                    seed=seed,
                    status="failed",
                    steps=step_done,
                    loss_trace=loss_trace,
                    diagnostics_trace=diag_trace,
                    final_phi=np.asarray(checkpoint[0]).tolist(),
                    wall_seconds=time.perf_counter() - t_start,
                    lr_final=lr,
                    error=f"non-finite loss at step {step_done + n} after lr retry",
                    config=config.resolved(),
                )
            retried = True
            lr = lr / 2.0
            phi, m, v, t = checkpoint
            continue
        phi, m, v, t = new_phi, new_m, new_v, new_t
        checkpoint = (phi, m, v, t)
        step_done += n
        loss_trace.append(loss)
        for name, val in last_diag.items():
            if name != "loss":
                diag_trace.setdefault(name, []).append(float(val))

    return RunRecord(
        config_hash=config.config_hash(),
        seed=seed,
        status="ok",
        steps=step_done,
        loss_trace=loss_trace,
        diagnostics_trace=diag_trace,
        final_phi=np.asarray(phi).tolist(),
        wall_seconds=time.perf_counter() - t_start,
        lr_final=lr,
        config=config.resolved(),
    )


def final_params(record: RunRecord, family: VariationalFamily) -> ParamVector:
    return ParamVector(np.asarray(record.final_phi), family.layout)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def replicate_seeds(base_seed: int, replicates: int) -> list[int]:
    state = np.random.SeedSequence(base_seed).generate_state(replicates, np.uint32)
    return [int(s) for s in state]


def reference_for_run(config: ExperimentConfig, task: ModelTask, seed: int,
                      cache_directory=None) -> ReferencePosterior:
    """Reference posterior for a run: per-observation for regenerated tasks,
    shared (fixed key) for fixed-observation tasks; cached on disk."""
    opts = dict(config.reference)
    n_ref = int(opts.pop("n_ref", 10_000))
    ref_seed = int(opts.pop("seed", 0x5EED))
    if task.name in REGENERATED_TASKS:
        ref_key = fold_in(key_from_seed(seed), 0x4EF)
        ref_seed = seed
    else:
        ref_key = key_from_seed(ref_seed)
    cache_directory = cache_directory or config.output.get("cache_dir")
    return cached_reference(
        task, ref_key, seed=ref_seed, n_ref=n_ref, directory=cache_directory, **opts
    )


def evaluate_record(config: ExperimentConfig, record: RunRecord,
                    cache_directory=None, task: ModelTask | None = None,
                    family: VariationalFamily | None = None) -> dict:
    """(Re)compute the metric report for a stored run against its reference."""
    if task is None:
        task = build_task(config, record.seed)
    if family is None:
        family = family_for(config, task)
    phi = final_params(record, family)
    reference = reference_for_run(config, task, record.seed, cache_directory)
    key = fold_in(key_from_seed(record.seed), 0x3E7)
    report = metric_report(family, phi, reference, key=key)
    return report.to_dict()


def run_suite(config: ExperimentConfig, replicates: int | None = None,
              jobs: int | None = None, out_path=None, summary_path=None,
              with_metrics: bool = True, cache_directory=None) -> list[RunRecord]:
    """Train `replicates` runs with derived seeds, appending records to a
    JSON-lines log as they finish and a CSV metric summary at the end."""
    replicates = config.replicates if replicates is None else replicates
    jobs = config.jobs if jobs is None else jobs
    out_path = out_path or config.output.get("runs")
    summary_path = summary_path or config.output.get("summary")
    seeds = replicate_seeds(config.base_seed, replicates)

    regenerates = config.task["name"] in REGENERATED_TASKS
    shared_task = None if regenerates else build_task(config, seeds[0])
    shared_family = None if regenerates else family_for(config, shared_task)

    lock = threading.Lock()
    handle = open(out_path, "a") if out_path else None

    def one(seed: int) -> RunRecord:
        task = shared_task if shared_task is not None else build_task(config, seed)
        family = shared_family if shared_family is not None else family_for(config, task)
        try:
            record = train(config, seed, task=task, family=family)
        except Exception as err:  # noqa: BLE001 - a failed run must not kill the suite
            record = RunRecord(
                config_hash=config.config_hash(),
                seed=seed,
                status="failed",
                steps=0,
                loss_trace=[],
                diagnostics_trace={},
                final_phi=[],
                wall_seconds=0.0,
                lr_final=config.lr,
                error=f"{type(err).__name__}: {err}",
                config=config.resolved(),
            )
        if record.status == "ok" and with_metrics:
            try:
                record.metrics = evaluate_record(
                    config, record, cache_directory, task=task, family=family
                )
            except Exception as err:  # noqa: BLE001
                record.status = "failed"
                record.error = f"metrics: {type(err).__name__}: {err}"
        if handle is not None:
            with lock:
                handle.write(record.to_json() + "\n")
                handle.flush()
        return record

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                records = list(pool.map(one, seeds))
        else:
            records = [one(s) for s in seeds]
    finally:
        if handle is not None:
            handle.close()

    if summary_path:
        write_summary_csv(records, summary_path)
    return records


def write_summary_csv(records: list[RunRecord], path):
    cols = [
        "seed", "status", "steps", "final_loss", "wall_seconds",
        "mean_ref_log_prob", "posterior_mean_accuracy",
        "calibration_mean_signed", "calibration_mean_abs",
    ]
    lines = [",".join(cols)]
    for rec in records:
        metrics = rec.metrics or {}
        diag = metrics.get("diagnostics", {})
        row = [
            str(rec.seed),
            rec.status,
            str(rec.steps),
            f"{rec.loss_trace[-1]:.8g}" if rec.loss_trace else "",
            f"{rec.wall_seconds:.2f}",
            f"{metrics.get('mean_ref_log_prob', float('nan')):.8g}" if metrics else "",
            f"{metrics.get('posterior_mean_accuracy', float('nan')):.8g}" if metrics else "",
            f"{diag.get('calibration_mean_signed', float('nan')):.8g}" if metrics else "",
            f"{diag.get('calibration_mean_abs', float('nan')):.8g}" if metrics else "",
        ]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_records(path) -> list[RunRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RunRecord.from_json(line))
    return records


# ---------------------------------------------------------------------------
# SNR sweep
# ---------------------------------------------------------------------------


def snr_sweep(dim: int = 50, alphas=(0.75, 1.0), sweep: str = "log-sigma",
              offsets=None, n_seeds: int = 1000, k: int = 8,
              seed: int = 0) -> list[dict]:
    """Gradient signal/noise/SNR on the toy normal task along a parameter line
    through the closed-form optimum, per objective.

    sweep = "log-sigma" holds the mean at the solution and moves the shared
    log-scale; "mean" does the reverse. Values are averaged over the swept
    block's coordinates.
    """
    if sweep not in ("log-sigma", "mean"):
        raise ConfigurationError("sweep must be 'log-sigma' or 'mean'")
    if offsets is None:
        offsets = np.array([-0.5, -0.3, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3, 0.5])
    offsets = np.asarray(offsets, dtype=np.float64)

    task = make_task("toy-normal", dim=dim)
    family = build_family({"name": "mean-field-normal", "dim": dim})
    key = key_from_seed(seed)
    opt_mean = np.full(dim, 0.8)
    opt_log_sigma = np.full(dim, 0.5 * np.log(0.8))

    objectives = [(f"softcvi-alpha={a:g}", ObjectiveSpec("softcvi", k, NegativeSpec("proposal-power", a)))
                  for a in alphas]
    objectives.append(("snis-fkl", ObjectiveSpec("snis-fkl", k)))
    objectives.append(("elbo", ObjectiveSpec("elbo", k)))

    if sweep == "log-sigma":
        block, base = "log_scale", opt_log_sigma
        center = 0.5 * np.log(0.8)
    else:
        block, base = "mean", opt_mean
        center = 0.8
    lo, length = None, None
    for name, off, ln in family.layout:
        if name == block:
            lo, length = off, ln

    rows = []
    for obj_name, spec in objectives:
        for off in offsets:
            phi = (
                family.init_params(key)
                .replace_block("mean", opt_mean)
                .replace_block("log_scale", opt_log_sigma)
                .replace_block(block, base + off)
            )
            out = grad_snr(spec, task, family, phi, n_seeds=n_seeds,
                           key=fold_in(key, int(round(off * 1000)) & 0xFFFF))
            sl = slice(lo, lo + length)
            sig = float(np.mean(out["signal"][sl]))
            noi = float(np.mean(out["noise"][sl]))
            degenerate = bool(np.all(out["degenerate"][sl]))
            snr = float("nan") if degenerate else sig / noi if noi > 0 else float("inf")
            rows.append(
                {
                    "objective": obj_name,
                    "sweep": sweep,
                    "value": float(center + off),
                    "offset": float(off),
                    "signal": sig,
                    "noise": noi,
                    "snr": snr,
                    "degenerate": degenerate,
                }
            )
    return rows


def write_snr_csv(rows: list[dict], path):
    cols = ["objective", "sweep", "value", "offset", "signal", "noise", "snr", "degenerate"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------


def _audit_pairs(seed: int):
    key = key_from_seed(seed)
    return [
        (make_task("toy-normal", dim=3), build_family({"name": "mean-field-normal", "dim": 3})),
        (make_task("linear-regression", key, p=5, n=40),
         build_family({"name": "full-normal", "dim": 6})),
        (make_task("eight-schools"), build_family("eight-schools-family")),
        (make_task("garch", key), build_family("garch-family")),
        (make_task("slcp", key), build_family("slcp-flow")),
    ]


AUDIT_ESTIMATORS = (
    ("softcvi-0.75", ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 0.75))),
    ("softcvi-1.0", ObjectiveSpec("softcvi", 8, NegativeSpec("proposal-power", 1.0))),
    ("softcvi-joint-0.5", ObjectiveSpec("softcvi", 8, NegativeSpec("joint-power", 0.5))),
    ("elbo", ObjectiveSpec("elbo", 8)),
    ("snis-fkl", ObjectiveSpec("snis-fkl", 8)),
    ("lv-snis-fkl", ObjectiveSpec("lv-snis-fkl", 8)),
)


# central differences lose the signal once |loss| * eps / (2h) approaches the
# derivative scale; losses beyond this are skipped and redrawn in the audit
FD_LOSS_PRECISION_LIMIT = 1e5


def gradient_audit(n_points: int = 100, tol: float = 1e-4, seed: int = 0,
                   estimators=AUDIT_ESTIMATORS, quick: bool = False) -> tuple[bool, list[dict]]:
    """Finite-difference audit of every estimator x family pair.

    Each point perturbs phi, draws a fresh sample key and compares the analytic
    gradient projected on a random direction against a central difference of
    the same-key, same-stop-gradient loss. Candidate points whose loss exceeds
    the float64 finite-difference precision budget (possible for tempered
    negatives on a near-singular log-joint) are skipped and redrawn, and the
    skip count is reported. Also runs the flow roundtrip and normalization
    checks. Returns (all_ok, rows).
    """
    from .core import to_jax_key
    from .objectives import build_value_and_grad as _bvg

    rng = np.random.default_rng(seed)
    pairs = _audit_pairs(seed)
    if quick:
        pairs = pairs[:2]
        n_points = min(n_points, 10)
    rows = []
    all_ok = True
    for task, family in pairs:
        phi0 = family.init_params(key_from_seed(seed))
        for est_name, spec in estimators:
            vg = jax.jit(_bvg(task, family, spec))
            worst = 0.0
            accepted = 0
            skipped = 0
            attempt = 0
            while accepted < n_points and attempt < 5 * n_points:
                attempt += 1
                values = phi0.values + 0.1 * rng.normal(size=phi0.dim)
                phi = phi0.with_values(values)
                kk = fold_in(key_from_seed(seed + 1), attempt)
                f = frozen_loss_for_fd(task, family, spec, phi, kk)
                loss0 = f(values)
                if not np.isfinite(loss0) or abs(loss0) > FD_LOSS_PRECISION_LIMIT:
                    skipped += 1
                    continue
                _, grad, _ = vg(jnp.asarray(values), to_jax_key(kk))
                grad = np.asarray(grad)
                direction = rng.normal(size=phi0.dim)
                direction /= np.linalg.norm(direction)
                fd = finite_diff_directional(f, values, direction)
                err = abs(float(grad @ direction) - fd) / max(abs(fd), 1e-6)
                worst = max(worst, err)
                accepted += 1
            ok = worst < tol and accepted == n_points
            all_ok &= ok
            rows.append(
                {"check": "grad-fd", "task": task.name, "family": family.name,
                 "estimator": est_name, "worst_rel_err": worst, "ok": ok,
                 "skipped": skipped}
            )

    rows.extend(_flow_checks(seed, quick))
    all_ok &= all(r["ok"] for r in rows)
    return all_ok, rows


def _flow_checks(seed: int, quick: bool) -> list[dict]:
    """Roundtrip (1e-8) and importance-sampling normalization (3 SE) checks."""
    from .core import to_jax_key
    from .distributions.bases import open_uniform
    from .distributions.spline import rqs_forward_raw

    rows = []
    rng = np.random.default_rng(seed + 2)
    key = key_from_seed(seed + 3)

    flow = build_family("slcp-flow")
    phi = flow.init_params(key)
    phi = phi.with_values(phi.values + 0.15 * rng.normal(size=phi.dim))
    n = 200 if quick else 2000
    draws = sample(flow, phi, key, n)

    def fwd(theta):
        v = theta
        for i in range(flow.n_layers):
            v = v[jnp.asarray(flow.perms[i])]
            v, _ = rqs_forward_raw(v, *flow._layer_knots(jnp.asarray(phi.values), i, v))
        return v

    eps_rec = np.asarray(jax.vmap(fwd)(jnp.asarray(draws)))
    eps = np.asarray(open_uniform(to_jax_key(key), (n, 5), -3.0, 3.0))
    rt_err = float(np.max(np.abs(eps_rec - eps)))
    rows.append({"check": "flow-roundtrip", "task": "slcp", "family": flow.name,
                 "estimator": "", "worst_rel_err": rt_err, "ok": rt_err < 1e-8})

    n_is = 20_000 if quick else 200_000
    u = rng.uniform(-3.0, 3.0, size=(n_is, 5))
    w = np.exp(log_prob_batch(flow, phi, u) + 5 * np.log(6.0))
    est, se = float(w.mean()), float(w.std() / np.sqrt(n_is))
    rows.append({"check": "flow-normalization", "task": "slcp", "family": flow.name,
                 "estimator": "", "worst_rel_err": abs(est - 1.0),
                 "ok": abs(est - 1.0) < 3 * se + 1e-3})

    garch = build_family("garch-family")
    pg = garch.init_params(key)
    pg = pg.with_values(pg.values + 0.1 * rng.normal(size=pg.dim))
    mu = rng.standard_t(3, size=n_is) * 3.0
    a0 = np.exp(rng.standard_t(3, size=n_is) * 2.0)
    a1 = rng.uniform(0, 1, size=n_is)
    b1 = rng.uniform(0, 1, size=n_is) * (1 - a1)
    pts = np.stack([mu, a0, a1, b1], axis=-1)
    from .distributions.bases import student_t_logpdf

    log_ref = np.asarray(student_t_logpdf(jnp.asarray(mu), 3.0, 0.0, 3.0)).copy()
    log_ref += np.asarray(student_t_logpdf(jnp.asarray(np.log(a0)), 3.0, 0.0, 2.0)) - np.log(a0)
    log_ref += -np.log1p(-a1)
    w = np.exp(log_prob_batch(garch, pg, pts) - log_ref)
    est, se = float(w.mean()), float(w.std() / np.sqrt(n_is))
    rows.append({"check": "garch-spline-normalization", "task": "garch",
                 "family": garch.name, "estimator": "",
                 "worst_rel_err": abs(est - 1.0), "ok": abs(est - 1.0) < 3 * se + 1e-3})
    return rows
