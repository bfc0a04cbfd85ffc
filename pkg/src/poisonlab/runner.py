"""Experiment orchestration: seeded runs, sweeps, the defense harness and all
on-disk artifacts.

Every emitted file is byte-deterministic given (config, seeds): rows are
written in sorted run-key order, floats with fixed formatting, and all
randomness flows through keyed streams. Clean and poisoned arms share each
seed so their difference isolates the poison.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import attacks, defense
from .config import AttackConfig, ExperimentPlan
from .data import StreamSpec, make_stream, write_idx_images, write_idx_labels, write_csv_pixels
from .errors import ConfigError
from .methods import TableReport, joint_train, report_delta, report_tables, run_stream
from .rng import subseed

SCHEMAS = {
    "runs.csv": ("runs.v1", ("run_id", "seed", "method", "attack", "p", "phase",
                             "t_p_acc", "before_acc", "after_acc", "total_acc")),
    "deltas.csv": ("deltas.v1", ("run_id", "seed", "method", "attack", "p", "phase",
                                 "t_p_delta", "before_delta", "after_delta", "total_delta")),
    "val_gap.csv": ("val_gap.v1", ("run_id", "seed", "method", "attack", "p",
                                   "val_acc", "test_acc_tp")),
    "sweep.csv": ("sweep.v1", ("axis", "value", "seed", "phase", "t_p_acc", "before_acc",
                               "after_acc", "total_acc", "t_p_delta", "before_delta",
                               "after_delta", "total_delta")),
    "betas.csv": ("betas.v1", ("stream", "task_id", "beta_deg", "poisoned", "detected")),
    "defense_metrics.csv": ("defense_metrics.v1", ("statistic", "alpha_deg", "acc",
                                                   "clean_acc", "attack_acc", "f1")),
    "pr_curve.csv": ("pr_curve.v1", ("threshold", "precision", "recall")),
    "plot_scatter.csv": ("plot_scatter.v1", ("attack", "seed", "before_acc", "after_acc")),
    "plot_severity.csv": ("plot_severity.v1", ("value", "mean_total_delta")),
    "plot_pr.csv": ("plot_pr.v1", ("recall", "precision")),
}

SWEEP_AXES = ("severity", "pp", "lambda", "p_position", "pn")

DEFAULT_AXIS_VALUES = {
    "severity": (1, 2, 3, 4, 5),
    "pp": (20, 40, 60, 80, 100),
    "lambda": (1, 10),
    "pn": (1, 2, 3, 4, 5),
}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path: str, name: str, rows) -> None:
    _, columns = SCHEMAS[name]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_manifest(out_dir: str, files) -> None:
    lines = [f"{name}: {SCHEMAS[name][0]}" for name in sorted(files) if name in SCHEMAS]
    with open(os.path.join(out_dir, "MANIFEST.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def make_poison_spec(attack: AttackConfig, run_seed: int) -> attacks.PoisonSpec:
    seed = subseed(run_seed, "attack")
    if attack.preset is not None:
        return attacks.preset(attack.preset, kinds_catalog=attack.kinds,
                              severity=attack.severity, seed=seed)
    return attacks.PoisonSpec(pcp=attack.pcp, pn=attack.pn or 1, pp=attack.pp or 100.0,
                              severity=attack.severity, kinds=attack.kinds, seed=seed)


@dataclass
class RunOutput:
    run_id: str
    seed: int
    method: str
    attack_label: str
    p: int
    report: TableReport
    val_acc_tp: float | None = None
    events: tuple = ()


def _joint_matrix(tasks, plan: ExperimentPlan, seed: int, spec) -> list:
    """Synthetic accuracy matrix for JOINT: row p from joint training on the
    task prefix through p, final row from joint training on the full stream."""
    p = plan.attack.p
    rows = [[] for _ in tasks]
    prefix = joint_train(tasks[:p + 1], plan.method, seed,
                         poison_spec=spec, poisoned_index=p if spec else None)
    rows[p] = prefix["per_task"]
    if p == len(tasks) - 1:
        return rows
    full = joint_train(tasks, plan.method, seed,
                       poison_spec=spec, poisoned_index=p if spec else None)
    rows[-1] = full["per_task"]
    return rows


def execute_run(plan: ExperimentPlan, seed: int, poisoned: bool,
                detector=None) -> RunOutput:
    stream_spec = replace(plan.stream, seed=seed)
    tasks = make_stream(stream_spec)
    p = plan.attack.p
    spec = make_poison_spec(plan.attack, seed) if poisoned else None
    label = (plan.attack.preset or "CUSTOM").lower() if poisoned else "clean"
    run_id = f"{plan.method.method}-{label}-s{seed}".lower()

    if plan.method.method == "JOINT":
        acc = _joint_matrix(tasks, plan, seed, spec)
        return RunOutput(run_id=run_id, seed=seed, method="JOINT", attack_label=label, p=p,
                         report=report_tables(acc, p))

    attack_plan = {p: spec} if spec else None
    if detector is not None:
        result = defense.guarded_run(tasks, plan.method, seed, detector, attack_plan=attack_plan)
    else:
        result = run_stream(tasks, plan.method, seed, attack_plan=attack_plan)
    log_p = next((log for log in result.logs if log.task_id == p), None)
    val_acc = log_p.epoch_val_acc[-1] if log_p else None
    return RunOutput(run_id=run_id, seed=seed, method=plan.method.method, attack_label=label,
                     p=p, report=report_tables(result.acc_matrix, p), val_acc_tp=val_acc,
                     events=tuple(result.events))


def _run_job(args):
    plan, seed, poisoned = args
    detector = None
    if plan.defense.enabled and plan.method.method != "JOINT":
        stream_spec = replace(plan.stream, seed=seed)
        detector = defense.calibrate_alpha(make_stream(stream_spec),
                                           plan.defense.calibration_task, plan.method, seed,
                                           plan.defense.calibration_seeds,
                                           plan.defense.statistic)
    return execute_run(plan, seed, poisoned, detector=detector)


def run_plan(plan: ExperimentPlan) -> list:
    jobs = []
    for seed in sorted(plan.seeds):
        jobs.append((plan, seed, False))
        if plan.attack.active:
            jobs.append((plan, seed, True))
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            outputs = list(pool.map(_run_job, jobs))
    else:
        outputs = [_run_job(job) for job in jobs]
    return sorted(outputs, key=lambda r: (r.attack_label != "clean", r.seed))


def _phase_rows(report: TableReport):
    yield ("at_poisoning", report.at_poisoning.t_p, report.at_poisoning.before, None, None)
    yield ("final", report.final.t_p, report.final.before, report.final.after,
           report.final.total)


def _runs_rows(outputs):
    for out in outputs:
        for phase, t_p, before, after, total in _phase_rows(out.report):
            yield (out.run_id, out.seed, out.method, out.attack_label, out.p, phase,
                   t_p, before, after, total)


def _delta_rows(outputs):
    clean = {o.seed: o for o in outputs if o.attack_label == "clean"}
    for out in outputs:
        if out.attack_label == "clean" or out.seed not in clean:
            continue
        delta = report_delta(clean[out.seed].report, out.report)
        for phase, t_p, before, after, total in _phase_rows(delta):
            yield (out.run_id, out.seed, out.method, out.attack_label, out.p, phase,
                   t_p, before, after, total)


def _aggregate(outputs, attack_label, phase):
    """Mean and std (percent) per report group across seeds."""
    picked = [o.report for o in outputs if o.attack_label == attack_label]
    if not picked:
        return None
    groups = {}
    for name in ("t_p", "before", "after", "total"):
        vals = []
        for rep in picked:
            value = getattr(rep.at_poisoning if phase == "at_poisoning" else rep.final, name)
            if value is not None and not math.isnan(value):
                vals.append(100.0 * value)
        groups[name] = (float(np.mean(vals)), float(np.std(vals))) if vals else None
    return groups


def format_report(outputs, plan: ExperimentPlan) -> str:
    labels = []
    for out in outputs:
        if out.attack_label not in labels:
            labels.append(out.attack_label)
    lines = [
        f"method={plan.method.method} stream={list(plan.stream.task_class_counts)} "
        f"p={plan.attack.p} seeds={len(plan.seeds)} (accuracies in percent, "
        "mean over seeds, poisoned-minus-clean delta in parentheses)",
    ]
    for phase in ("at_poisoning", "final"):
        lines.append("")
        lines.append(f"[{phase}]")
        header = f"{'attack':<12}{'T_p':>16}{'before':>16}{'after':>16}{'total':>16}"
        lines.append(header)
        clean_groups = _aggregate(outputs, "clean", phase)
        for label in labels:
            groups = _aggregate(outputs, label, phase)
            cells = []
            for name in ("t_p", "before", "after", "total"):
                if groups is None or groups[name] is None:
                    cells.append(f"{'-':>16}")
                    continue
                mean, _ = groups[name]
                if label != "clean" and clean_groups and clean_groups[name]:
                    delta = mean - clean_groups[name][0]
                    delta = 0.0 if delta == 0 else delta  # avoid -0.0 in reports
                    cells.append(f"{mean:7.1f} ({delta:+5.1f})"[:16].rjust(16))
                else:
                    cells.append(f"{mean:16.1f}")
            lines.append(f"{label:<12}" + "".join(cells))
    return "\n".join(lines) + "\n"


def cmd_run(plan: ExperimentPlan, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    outputs = run_plan(plan)
    files = ["runs.csv"]
    write_csv(os.path.join(out_dir, "runs.csv"), "runs.csv", _runs_rows(outputs))
    if plan.attack.active:
        files.append("deltas.csv")
        write_csv(os.path.join(out_dir, "deltas.csv"), "deltas.csv", _delta_rows(outputs))
    val_rows = [(o.run_id, o.seed, o.method, o.attack_label, o.p, o.val_acc_tp,
                 o.report.at_poisoning.t_p)
                for o in outputs if o.val_acc_tp is not None]
    if val_rows:
        files.append("val_gap.csv")
        write_csv(os.path.join(out_dir, "val_gap.csv"), "val_gap.csv", val_rows)
    if plan.defense.enabled:
        with open(os.path.join(out_dir, "audit.log"), "w", encoding="utf-8") as fh:
            for o in outputs:
                for event in o.events:
                    fh.write(defense.format_audit_line(event) + "\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report(outputs, plan))
    write_manifest(out_dir, files)


_PRESET_PARAMS = {
    "BASE": (100.0, 1, 100.0),
    "BAIT": (50.0, 1, 100.0),
    "MULTIBASE": (100.0, 5, 100.0),
    "MULTIBAIT": (50.0, 5, 100.0),
}


def _resolved_attack(attack: AttackConfig) -> AttackConfig:
    """Fold a preset into explicit (pcp, pn, pp) so single axes can vary."""
    if attack.preset is not None:
        pcp, pn, pp = _PRESET_PARAMS[attack.preset]
        return replace(attack, preset=None, pcp=pcp, pn=pn, pp=pp)
    return replace(attack,
                   pcp=attack.pcp if attack.pcp is not None else 100.0,
                   pn=attack.pn or 1,
                   pp=attack.pp if attack.pp is not None else 100.0)


def _sweep_plan(plan: ExperimentPlan, axis: str, value) -> ExperimentPlan:
    if axis == "severity":
        return replace(plan, attack=replace(plan.attack, severity=int(value)))
    if axis == "pp":
        return replace(plan, attack=replace(_resolved_attack(plan.attack), pp=float(value)))
    if axis == "lambda":
        return replace(plan, method=replace(plan.method, lamb=float(value)))
    if axis == "p_position":
        return replace(plan, attack=replace(plan.attack, p=int(value)))
    if axis == "pn":
        return replace(plan, attack=replace(_resolved_attack(plan.attack), pn=int(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")


def cmd_sweep(plan: ExperimentPlan, axis: str, values, out_dir: str) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs a nonempty list of axis values")
    if not plan.attack.active:
        base_attack = replace(plan.attack, preset="BAIT")
        plan = replace(plan, attack=base_attack)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in values:
        cell_plan = _sweep_plan(plan, axis, value)
        outputs = run_plan(cell_plan)
        clean = {o.seed: o for o in outputs if o.attack_label == "clean"}
        for out in outputs:
            if out.attack_label == "clean":
                continue
            delta = report_delta(clean[out.seed].report, out.report)
            for (phase, t, b, a, tot), (_, dt, db, da, dtot) in zip(
                    _phase_rows(out.report), _phase_rows(delta)):
                rows.append((axis, value, out.seed, phase, t, b, a, tot, dt, db, da, dtot))
    write_csv(os.path.join(out_dir, "sweep.csv"), "sweep.csv", rows)
    write_manifest(out_dir, ["sweep.csv"])


def largest_remainder(total: int, fractions) -> list:
    """Integer allocation of total by fractions; remainders to earlier groups
    on ties."""
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(total - sum(counts)):
        counts[order[i % len(order)]] += 1
    return counts


def build_harness_streams(plan: ExperimentPlan, base_seed: int):
    """Task populations for defense evaluation: several guarded streams of
    disjoint 2-class tasks drawn from an enlarged pool. Tasks at index >= 1
    count toward the evaluated mix; stream 0 stays clean and hosts the
    calibration task, poisons go to the following streams at the configured
    position."""
    mix = plan.harness
    per_stream = mix.stream_length - 1
    n_clean, n_poisoned = largest_remainder(mix.total_tasks,
                                            (mix.clean_fraction, mix.poisoned_fraction))
    if n_poisoned < 1:
        raise ConfigError("harness.poisoned_fraction yields zero poisoned tasks")
    n_streams = math.ceil(mix.total_tasks / per_stream)
    if n_streams <= n_poisoned:
        raise ConfigError("harness too small: every poisoned stream needs a clean stream 0")
    streams = []
    remaining = mix.total_tasks
    for s in range(n_streams):
        eval_count = min(per_stream, remaining)
        remaining -= eval_count
        n_tasks = eval_count + 1
        poisoned_here = 1 <= s <= n_poisoned
        if poisoned_here and mix.position >= n_tasks:
            raise ConfigError(f"harness.position {mix.position} beyond truncated stream {s}")
        spec = StreamSpec(
            class_pool_size=mix.pool_classes,
            task_class_counts=(mix.classes_per_task,) * n_tasks,
            image_side=plan.stream.image_side,
            channels=plan.stream.channels,
            train_per_class=plan.stream.train_per_class,
            val_per_class=plan.stream.val_per_class,
            test_per_class=plan.stream.test_per_class,
            grating_cycles=plan.stream.grating_cycles,
            grating_cycles_max=plan.stream.grating_cycles_max,
            noise_sigma=plan.stream.noise_sigma,
            phase_jitter=plan.stream.phase_jitter,
            seed=subseed(base_seed, "harness", s),
        )
        attack_plan = None
        if poisoned_here:
            spec_seed = subseed(base_seed, "harness-attack", s)
            attack_plan = {mix.position: attacks.preset(mix.attack, kinds_catalog=plan.attack.kinds,
                                                        severity=mix.severity, seed=spec_seed)}
        streams.append((spec, attack_plan))
    return streams


def cmd_defense_eval(plan: ExperimentPlan, out_dir: str) -> dict:
    """Guarded runs over the harness streams with per-stream calibration.

    Every stream calibrates its own threshold on its early clean task (the
    defended sequence only ever sees its own data); recorded angles are pooled
    for the PR curve and for post-hoc metrics of all five statistics.
    """
    os.makedirs(out_dir, exist_ok=True)
    base_seed = plan.seeds[0]
    streams = build_harness_streams(plan, base_seed)
    audit_path = os.path.join(out_dir, "audit.log")
    open(audit_path, "w").close()

    beta_rows, scored = [], []
    calibrations = []
    for s, (spec, attack_plan) in enumerate(streams):
        tasks = make_stream(spec)
        angles = defense.calibration_angles(tasks, plan.defense.calibration_task, plan.method,
                                            spec.seed, plan.defense.calibration_seeds)
        alphas = {stat: defense.aggregate_stat(angles, stat) for stat in defense.STATISTICS}
        calibrations.append((angles, alphas))
        detector = defense.DetectorState(alpha_deg=alphas[plan.defense.statistic],
                                         statistic=plan.defense.statistic,
                                         calibration_task_id=plan.defense.calibration_task,
                                         calibration_seeds=tuple(plan.defense.calibration_seeds),
                                         angles=tuple(angles))
        result = defense.guarded_run(tasks, plan.method, spec.seed, detector,
                                     attack_plan=attack_plan, audit_path=audit_path)
        for event in result.events:
            if event["task_id"] < 1:
                continue
            beta_rows.append((s, event["task_id"], event["beta_deg"],
                              event["truth_poisoned"], event["detected"]))
            scored.append((event["beta_deg"], event["truth_poisoned"], alphas))

    write_csv(os.path.join(out_dir, "betas.csv"), "betas.csv", beta_rows)
    records = [(beta, truth) for beta, truth, _ in scored]
    metric_rows = []
    metrics_by_stat = {}
    for stat in defense.STATISTICS:
        m = defense.detection_metrics([(beta - alphas[stat], truth)
                                       for beta, truth, alphas in scored], 0.0)
        metrics_by_stat[stat] = m
        mean_alpha = float(np.mean([alphas[stat] for _, alphas in calibrations]))
        metric_rows.append((stat, mean_alpha, m["acc"], m["clean_acc"], m["attack_acc"],
                            m["f1"]))
    write_csv(os.path.join(out_dir, "defense_metrics.csv"), "defense_metrics.csv", metric_rows)
    curve = defense.pr_curve(records)
    write_csv(os.path.join(out_dir, "pr_curve.csv"), "pr_curve.csv", curve)
    with open(os.path.join(out_dir, "calibration.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"calibration_task: {plan.defense.calibration_task}\n")
        fh.write("calibration_seeds: " + ",".join(str(s) for s in plan.defense.calibration_seeds) + "\n")
        for s, (angles, alphas) in enumerate(calibrations):
            fh.write(f"stream{s}_angles_deg: " + ",".join(f"{a:.6f}" for a in angles) + "\n")
            for stat in defense.STATISTICS:
                fh.write(f"stream{s}_alpha[{stat}]: {alphas[stat]:.6f}\n")
    write_manifest(out_dir, ["betas.csv", "defense_metrics.csv", "pr_curve.csv"])
    return {"alphas": {stat: float(np.mean([a[stat] for _, a in calibrations]))
                       for stat in defense.STATISTICS},
            "metrics": metrics_by_stat, "records": records}


def cmd_defense_calibrate(plan: ExperimentPlan, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    stream_spec = replace(plan.stream, seed=plan.seeds[0])
    tasks = make_stream(stream_spec)
    angles = defense.calibration_angles(tasks, plan.defense.calibration_task, plan.method,
                                        plan.seeds[0], plan.defense.calibration_seeds)
    alphas = {stat: defense.aggregate_stat(angles, stat) for stat in defense.STATISTICS}
    with open(os.path.join(out_dir, "calibration.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"calibration_task: {plan.defense.calibration_task}\n")
        fh.write("calibration_seeds: " + ",".join(str(s) for s in plan.defense.calibration_seeds) + "\n")
        fh.write("angles_deg: " + ",".join(f"{a:.6f}" for a in angles) + "\n")
        for stat in defense.STATISTICS:
            fh.write(f"alpha[{stat}]: {alphas[stat]:.6f}\n")
    return alphas


def cmd_gen_data(plan: ExperimentPlan, out_dir: str, fmt: str = "idx") -> None:
    os.makedirs(out_dir, exist_ok=True)
    from .data import synth_class_pool

    spec = replace(plan.stream, seed=plan.seeds[0])
    pool = synth_class_pool(spec)
    for split_name, table in (("train", pool.train_pool), ("test", pool.test)):
        samples = [s for cls in sorted(table) for s in table[cls]]
        if fmt == "idx":
            if spec.channels != 1:
                raise ConfigError("IDX export supports single-channel images only")
            images = np.stack([s.image[:, :, 0] for s in samples])
            labels = np.array([s.label for s in samples], dtype=np.int64)
            write_idx_images(os.path.join(out_dir, f"{split_name}-images-idx3-ubyte"), images)
            write_idx_labels(os.path.join(out_dir, f"{split_name}-labels-idx1-ubyte"), labels)
        elif fmt == "csv":
            write_csv_pixels(os.path.join(out_dir, f"{split_name}.csv"), samples)
        else:
            raise ConfigError(f"unknown gen-data format {fmt!r} (expected idx or csv)")


def _read_csv(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l.rstrip("\n") for l in fh]
    header = lines[0].split(",")
    return header, [dict(zip(header, line.split(","))) for line in lines[1:] if line]


def emit_plotdata(out_dir: str) -> None:
    """Plot-ready CSVs derived from the raw artifacts in out_dir."""
    runs_path = os.path.join(out_dir, "runs.csv")
    scatter_rows = []
    if os.path.exists(runs_path):
        _, rows = _read_csv(runs_path)
        for row in rows:
            if row["phase"] == "final" and row["attack"] != "clean" and row["before_acc"]:
                scatter_rows.append((row["attack"], int(row["seed"]),
                                     float(row["before_acc"]), float(row["after_acc"])))
    write_csv(os.path.join(out_dir, "plot_scatter.csv"), "plot_scatter.csv", scatter_rows)

    severity_rows = []
    sweep_path = os.path.join(out_dir, "sweep.csv")
    if os.path.exists(sweep_path):
        _, rows = _read_csv(sweep_path)
        by_value = {}
        for row in rows:
            if row["axis"] == "severity" and row["phase"] == "final" and row["total_delta"]:
                by_value.setdefault(row["value"], []).append(float(row["total_delta"]))
        for value in sorted(by_value, key=float):
            severity_rows.append((value, float(np.mean(by_value[value]))))
    write_csv(os.path.join(out_dir, "plot_severity.csv"), "plot_severity.csv", severity_rows)

    pr_rows = []
    pr_path = os.path.join(out_dir, "pr_curve.csv")
    if os.path.exists(pr_path):
        _, rows = _read_csv(pr_path)
        pr_rows = sorted(((float(r["recall"]), float(r["precision"])) for r in rows))
    write_csv(os.path.join(out_dir, "plot_pr.csv"), "plot_pr.csv", pr_rows)


def cmd_report(out_dir: str) -> None:
    runs_path = os.path.join(out_dir, "runs.csv")
    if not os.path.exists(runs_path):
        raise FileNotFoundError(f"{runs_path}: run artifacts missing, nothing to report")
    emit_plotdata(out_dir)


def schema_check(out_dir: str) -> list:
    """Validate every known CSV in out_dir against its registered schema."""
    problems = []
    for name, (version, columns) in sorted(SCHEMAS.items()):
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            continue
        header, rows = _read_csv(path)
        if tuple(header) != tuple(columns):
            problems.append(f"{name}: header {header} does not match schema {version}")
            continue
        for i, row in enumerate(rows, start=2):
            if len(row) != len(columns):
                problems.append(f"{name}: line {i}: {len(row)} cells, expected {len(columns)}")
                break
    return problems
