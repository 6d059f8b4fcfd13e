# laaf/worker.py
"""Run orchestration behind the CLI subcommands.

One training job per (preset, mode, seed) writes into
<out>/<preset>/<mode>/seed-<seed>/: trace.csv, checkpoint.json, summary.json
(and data.csv / collocation.csv with export_data). Dynamics studies write
<out>/<preset>/dynamics/seed-<seed>/<method>.csv plus a combined summary.json.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, DomainError
from .services.autodiff import grad_check
from .services.config import PROGRESS, RunConfig
from .services.dynamics import (
    condition_study,
    conditioning_gaaf,
    conditioning_general,
    constant_network_check,
    corrupt_locality,
    descent_check,
    dynamics_report,
    euler_identity_check,
    locality_matrix,
    verify_step_equivalence,
)
from .services.network import ActivationMode, NetworkParams, Nonlinearity, SlopeMode, bind_leaves, evaluate, flatten, init
from .services.objective import DataLoss, Objective, ObjectiveSpec, RecoveryKind, total_loss
from .services.optimize import OptimizerState, train
from .services.problems import ProblemPreset, build_preset
from .services.seeding import stream
from .services.storage import (
    RunSummary,
    save_checkpoint,
    save_condition_run,
    save_dataset,
    save_json,
    save_summary,
    save_trace,
)

logger = logging.getLogger(__name__)

EQUIVALENCE_TOL = 1e-10
EULER_TOL = 1e-9
GRADIENT_TOL = 1e-5
CONSTANT_GAP_TOL = 1e-12
CONSTANT_GRAD_TOL = 1e-14
REDUCTION_TOL = 1e-14


def load_preset(config: RunConfig, seed: int) -> ProblemPreset:
    """Preset for one seed with the [optimizer], [network] and [objective] overrides applied."""
    try:
        preset = build_preset(config.run.preset, seed, **config.problem.options())
    except (TypeError, DomainError) as ex:
        raise ConfigError(f"bad option for preset '{config.run.preset}': {ex}") from ex
    opt, net, obj = config.optimizer, config.network, config.objective
    if net.widths is not None:
        if net.widths[0] != preset.widths[0] or net.widths[-1] != preset.widths[-1]:
            raise ConfigError(
                f"'network.widths' must keep input width {preset.widths[0]} and output width {preset.widths[-1]}"
            )
        preset.widths = tuple(net.widths)
    if net.base is not None:
        preset.base = net.base
    if net.n is not None:
        preset.n = net.n
    if opt.kind is not None:
        preset.optimizer = opt.kind.value
    if opt.learning_rate is not None:
        preset.learning_rate = opt.learning_rate
    if opt.iterations is not None:
        preset.iterations = opt.iterations
    if opt.batch_size is not None:
        preset.batch_size = opt.batch_size
    for name in ("w_f", "w_u", "w_a"):
        if getattr(obj, name) is not None:
            setattr(preset, name, getattr(obj, name))
    return preset


def build_objective_spec(preset: ProblemPreset, mode: ActivationMode, recovery: bool) -> ObjectiveSpec:
    kind = RecoveryKind(mode.kind.value) if recovery and mode.has_slopes else RecoveryKind.NONE
    return ObjectiveSpec(
        w_f=preset.w_f,
        w_u=preset.w_u,
        w_a=preset.w_a,
        data_x=preset.data_x,
        data_u=preset.data_u,
        residual_x=preset.residual_x if preset.w_f > 0 else None,
        residual=preset.residual,
        recovery=kind,
        data_loss=preset.data_loss,
    )


def optimizer_state(config: RunConfig, preset: ProblemPreset) -> OptimizerState:
    opt = config.optimizer
    return OptimizerState(
        kind=preset.optimizer,
        learning_rate=preset.learning_rate,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
        armijo_beta=opt.armijo_beta,
        armijo_sigma=opt.armijo_sigma,
    )


def run_directory(config: RunConfig, preset: ProblemPreset, mode: SlopeMode, seed: int) -> Path:
    return config.out_dir / preset.name / mode.value / f"seed-{seed}"


def _quality(preset: ProblemPreset, params: NetworkParams) -> tuple[float | None, float | None]:
    """(relative L2 error against the reference solution, training accuracy for classifiers)."""
    error = accuracy = None
    if preset.reference is not None and preset.eval_x is not None:
        predicted = evaluate(params, preset.eval_x)[:, 0]
        reference = np.ravel(preset.reference(preset.eval_x))
        error = float(np.linalg.norm(predicted - reference) / np.linalg.norm(reference))
    if preset.data_loss == DataLoss.CROSS_ENTROPY.value:
        logits = evaluate(params, preset.data_x)
        accuracy = float(np.mean(np.argmax(logits, axis=1) == preset.data_u))
    return error, accuracy


def train_one(config: RunConfig, seed: int) -> RunSummary:
    preset = load_preset(config, seed)
    mode = ActivationMode(config.network.mode, preset.base, preset.n)
    params = init(preset.widths, mode, seed)
    spec = build_objective_spec(preset, mode, config.objective.recovery)
    objective = Objective(params, spec, freeze_slopes=config.objective.freeze_slopes)
    directory = run_directory(config, preset, mode.kind, seed)
    logger.info("training %s / %s / seed %d -> %s", preset.name, mode.kind.value, seed, directory)

    if config.run.export_data:
        save_dataset(directory / "data.csv", preset.data_x, preset.data_u, "label" if preset.data_loss == DataLoss.CROSS_ENTROPY.value else "u")
        if preset.residual_x is not None:
            save_dataset(directory / "collocation.csv", preset.residual_x)

    try:
        trace = train(
            objective,
            optimizer_state(config, preset),
            preset.iterations,
            batch_size=preset.batch_size,
            seed=seed,
            record_timing=config.run.record_timing,
            progress=PROGRESS,
        )
    except DivergenceError as ex:
        if ex.trace is not None and ex.trace.records:
            save_trace(directory / "trace.csv", ex.trace, config.run.record_timing)
        raise

    final_params = objective.network(trace.theta)
    estimates = objective.inverse_values(trace.theta)
    save_trace(directory / "trace.csv", trace, config.run.record_timing)
    save_checkpoint(directory / "checkpoint.json", final_params, estimates)

    error, accuracy = _quality(preset, final_params)
    final = trace.final
    summary = RunSummary(
        preset=preset.name,
        mode=mode.kind.value,
        seed=seed,
        iterations=preset.iterations,
        final={"total": final.total, "mse_u": final.mse_u, "mse_f": final.mse_f, "recovery": final.recovery},
        slopes={"min": final.slope_min, "mean": final.slope_mean, "max": final.slope_max},
        inverse_estimates=estimates,
        inverse_true={p.name: p.true_value for p in preset.inverse if p.true_value is not None},
        relative_l2_error=error,
        accuracy=accuracy,
        settings={
            "widths": list(preset.widths),
            "base": preset.base.value,
            "n": preset.n,
            "optimizer": preset.optimizer,
            "learning_rate": preset.learning_rate,
            "w_f": preset.w_f,
            "w_u": preset.w_u,
            "w_a": preset.w_a,
            "recovery": spec.recovery.value,
            **preset.settings,
        },
    )
    save_summary(directory / "summary.json", summary)
    return summary


def run_training(config: RunConfig) -> list[RunSummary]:
    return [train_one(config, seed) for seed in config.run.seeds]


# -- verification -----------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    mode: str
    value: float | None
    threshold: float | None
    passed: bool
    note: str = ""


def _tiny_case(rng: np.random.Generator, kind: SlopeMode, index: int) -> tuple[NetworkParams, ObjectiveSpec]:
    depth = int(rng.integers(2, 5))
    widths = [int(w) for w in rng.integers(1, 4, size=depth + 1)]
    params = init(widths, ActivationMode(kind, Nonlinearity.TANH, 1.0), index)
    params.slopes = rng.uniform(0.5, 1.5, size=params.slopes.size)
    for bias in params.biases:
        bias[:] = rng.normal(0.0, 0.1, size=bias.size)
    adaptive = kind is not SlopeMode.FIXED
    spec = ObjectiveSpec(
        w_u=1.0,
        w_a=1.0 if adaptive else 0.0,
        data_x=rng.uniform(-1.0, 1.0, size=(5, widths[0])),
        data_u=rng.normal(size=(5, widths[-1])),
        recovery=RecoveryKind(kind.value) if adaptive else RecoveryKind.NONE,
    )
    return params, spec


def _loss_function(params: NetworkParams, spec: ObjectiveSpec):
    def f(tape, xs):
        return total_loss(params, spec, tape, bound=bind_leaves(params, xs))

    return f


def _gaaf_reduction_residual(rng: np.random.Generator, size: int = 6) -> float:
    a = float(rng.uniform(0.5, 1.5))
    W, g = rng.normal(size=size), rng.normal(size=size)
    eta = 0.01
    general, _ = conditioning_general(np.ones((size, 1)), np.array([a]), W, g, eta)
    g_hat, _ = conditioning_gaaf(a, W)
    expected = g_hat - eta * a * float(np.dot(W, g)) * np.eye(size)
    return float(np.max(np.abs(general - expected)))


def verify_mode(config: RunConfig, kind: SlopeMode) -> list[CheckResult]:
    dyn = config.dynamics
    rng = stream(dyn.verify_seed, f"verify-{kind.value}")
    worst = {"gradient": 0.0, "equivalence": 0.0, "euler": 0.0, "constant_gap": 0.0, "constant_grad": 0.0}
    descent_ok = True
    for index in range(dyn.verify_nets):
        params, spec = _tiny_case(rng, kind, index)
        worst["gradient"] = max(worst["gradient"], grad_check(_loss_function(params, spec), flatten(params).values, 1e-5))
        if kind is SlopeMode.FIXED:
            continue
        locality = locality_matrix(params)
        if dyn.corrupt_a:
            locality = corrupt_locality(locality)
        for eta in dyn.verify_etas:
            report = verify_step_equivalence(params, spec, eta, locality)
            worst["equivalence"] = max(worst["equivalence"], report.residual)
        worst["euler"] = max(worst["euler"], euler_identity_check(params, spec).max_residual)
        zero = params.copy()
        zero.slopes = np.zeros_like(zero.slopes)
        constant = constant_network_check(zero, spec)
        worst["constant_gap"] = max(worst["constant_gap"], constant.loss_gap)
        worst["constant_grad"] = max(worst["constant_grad"], constant.hidden_grad_max)
        descent_ok = descent_ok and descent_check(params, spec.without_recovery()).decreased

    mode = kind.value
    results = [CheckResult("gradient", mode, worst["gradient"], GRADIENT_TOL, worst["gradient"] < GRADIENT_TOL)]
    if kind is SlopeMode.FIXED:
        note = "skipped: fixed activations have no slopes"
        for name in ("equivalence", "euler", "constant_network", "descent"):
            results.append(CheckResult(name, mode, None, None, True, note))
        return results
    results += [
        CheckResult("equivalence", mode, worst["equivalence"], EQUIVALENCE_TOL, worst["equivalence"] < EQUIVALENCE_TOL,
                    "corrupted A" if dyn.corrupt_a else ""),
        CheckResult("euler", mode, worst["euler"], EULER_TOL, worst["euler"] < EULER_TOL),
        CheckResult("constant_network_gap", mode, worst["constant_gap"], CONSTANT_GAP_TOL,
                    worst["constant_gap"] < CONSTANT_GAP_TOL),
        CheckResult("constant_network_grad", mode, worst["constant_grad"], CONSTANT_GRAD_TOL,
                    worst["constant_grad"] <= CONSTANT_GRAD_TOL),
        CheckResult("descent", mode, None, None, descent_ok),
    ]
    if kind is SlopeMode.GAAF:
        residual = _gaaf_reduction_residual(rng)
        results.append(CheckResult("gaaf_reduction", mode, residual, REDUCTION_TOL, residual <= REDUCTION_TOL))
    return results


def run_verification(config: RunConfig, modes: list[SlopeMode] | None = None) -> list[CheckResult]:
    results = []
    for kind in modes or config.dynamics.verify_modes:
        results.extend(verify_mode(config, SlopeMode(kind)))
    return results


# -- dynamics -------------------------------------------------------------------------


def run_dynamics(config: RunConfig) -> dict:
    dyn = config.dynamics
    per_method: dict[str, dict[str, list[float]]] = {}
    name = None
    for seed in config.run.seeds:
        preset = load_preset(config, seed)
        if preset.data_loss != DataLoss.CROSS_ENTROPY.value:
            raise ConfigError(f"'run.preset' = '{config.run.preset}' is not a classification preset")
        name = preset.name
        runs = condition_study(preset, seed, dyn.methods, dyn.recovery_weight, dyn.hessian_every, PROGRESS)
        directory = config.out_dir / preset.name / "dynamics" / f"seed-{seed}"
        baseline = runs[SlopeMode.FIXED].conditions[0]
        for method, run in runs.items():
            save_condition_run(directory / f"{method.value}.csv", run.epochs, run.losses, run.conditions, run.normalized)
            stats = per_method.setdefault(method.value, {"final_loss": [], "final_normalized_condition": []})
            stats["final_loss"].append(run.losses[-1])
            stats["final_normalized_condition"].append(run.normalized[-1])
            if config.run.full and method is not SlopeMode.FIXED:
                report = dynamics_report(run.final_params, run.spec, dyn.eta, dyn.hessian_step, baseline)
                save_json(directory / f"report-{method.value}.json", report.to_dict(full=True))

    summary = {
        "preset": name,
        "seeds": config.run.seeds,
        "epochs": preset.iterations,
        "optimizer": preset.optimizer,
        "learning_rate": preset.learning_rate,
        "batch_size": preset.batch_size,
        "hessian_every": dyn.hessian_every,
        "loss": "data loss only",
        "preconditioner": "G0 without the eta diag(V) term, identity on the output layer",
        "methods": {
            method: {
                "final_loss": stats["final_loss"],
                "final_normalized_condition": stats["final_normalized_condition"],
                "mean_final_loss": float(np.mean(stats["final_loss"])),
                "mean_final_normalized_condition": float(np.mean(stats["final_normalized_condition"])),
            }
            for method, stats in per_method.items()
        },
    }
    save_json(config.out_dir / name / "dynamics" / "summary.json", summary)
    return summary
