"""Run reports: canonical JSON (stable hash), delimited telemetry, and
rendered figures alongside. Reports contain simulation time only, so repeated
runs with one seed hash identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _round_floats(obj, places: int = 9):
    if isinstance(obj, float):
        return round(obj, places)
    if isinstance(obj, dict):
        return {k: _round_floats(v, places) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, places) for v in obj]
    return obj


def build_report(runtime, outcomes: list, scenario: dict) -> dict:
    rewards = [e["reward"] for e in runtime.bandit_trace]
    transfer_steps = [o for o in outcomes if o["step"].get("action") == "transfer"]
    acquire_steps = [o for o in outcomes if o["step"].get("action") == "acquire"]
    report = {
        "scenario": scenario.get("name", "unnamed"),
        "schema_version": scenario.get("schema_version"),
        "seed": scenario.get("seed"),
        "outcomes": outcomes,
        "actions": [r.to_dict() for r in runtime.actions.values()],
        "safety_events": [e for e in runtime.events
                          if e["kind"] in ("violation", "estop", "estop_reset", "gate_trip",
                                           "controllers_killed", "controllers_unlocked",
                                           "utensil_break", "fault")],
        "violations": list(runtime.violation_log.events),
        "bandit": {
            "trace": runtime.bandit_trace,
            "attempts": runtime.bandit.attempts,
            "pulls": runtime.bandit.pulls.tolist(),
        },
        "interaction_timeline": runtime.interaction_timeline,
        "meal": {
            "bites_consumed": len(runtime.world.consumed),
            "acquisition_successes": int(sum(rewards)),
            "acquisition_attempts": len(rewards),
            "acquire_steps_ok": sum(1 for o in acquire_steps if o["ok"]),
            "transfers_ok": sum(1 for o in transfer_steps if o["ok"]),
        },
        "utensil": {"intact": runtime.world.utensil.intact,
                    "break_time": runtime.world.utensil.break_time},
        "timing": {"sim_duration": runtime.world.time, "ticks": runtime.world.tick},
    }
    return _round_floats(report)


def report_hash(report: dict) -> str:
    canonical = json.dumps(report, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_report(report: dict, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = report_hash(report)
    payload = dict(report)
    payload["report_hash"] = digest
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return digest


def write_telemetry_csv(rows: list, path):
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def render_figures(runtime, report: dict, stem: Path) -> list:
    """Joint angles, force trace with the gate and breakaway lines, bandit
    selections, and the tip/mouth distance profile."""
    rows = runtime.csv_rows
    written = []
    if not rows:
        return written
    t = np.array([r["t"] for r in rows])

    fig, ax = plt.subplots(figsize=(8, 4))
    for i in range(6):
        ax.plot(t, [r[f"q{i}"] for r in rows], label=f"joint {i}")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("angle (rad)")
    ax.set_title("joint trajectories")
    ax.legend(ncol=3, fontsize=8)
    path = stem.with_name(stem.name + "_joints.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8, 3.2))
    f_norm = [r["f_norm"] if r["f_norm"] != "" else np.nan for r in rows]
    ax.plot(t, f_norm, lw=0.9, label="|force|")
    p = runtime.params.get()
    ax.axhline(p.gate_f_max, color="tab:orange", ls="--", lw=1, label="force gate")
    ax.axhline(runtime.world.utensil.breakaway_threshold, color="tab:red", ls=":",
               lw=1, label="breakaway")
    for e in report["safety_events"]:
        if e["kind"] in ("gate_trip", "utensil_break", "estop", "fault"):
            ax.axvline(e["t"], color="k", lw=0.6, alpha=0.5)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("N")
    ax.set_title("measured force with safety thresholds")
    ax.legend(fontsize=8)
    path = stem.with_name(stem.name + "_forces.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    trace = report["bandit"]["trace"]
    if trace:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
        arms = [e["arm"] for e in trace]
        rewards = [e["reward"] for e in trace]
        colors = ["tab:green" if r else "tab:red" for r in rewards]
        ax1.scatter(range(1, len(arms) + 1), arms, c=colors, s=24)
        ax1.set_xlabel("attempt")
        ax1.set_ylabel("action index")
        ax1.set_title("bandit selections (green = acquired)")
        cum = np.cumsum(rewards) / np.arange(1, len(rewards) + 1)
        ax2.plot(range(1, len(rewards) + 1), cum, marker="o", ms=3)
        ax2.set_xlabel("attempt")
        ax2.set_ylabel("success rate")
        ax2.set_ylim(0, 1.05)
        ax2.set_title("cumulative acquisition success")
        fig.tight_layout()
        path = stem.with_name(stem.name + "_bandit.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    mouth_cols = [(r["t"], r["mouth_x"], r["mouth_y"], r["mouth_z"],
                   r["tip_x"], r["tip_y"], r["tip_z"])
                  for r in rows if r["mouth_x"] != ""]
    if mouth_cols:
        fig, ax = plt.subplots(figsize=(8, 3.2))
        mt = [c[0] for c in mouth_cols]
        dist = [np.linalg.norm(np.array(c[1:4]) - np.array(c[4:7])) for c in mouth_cols]
        ax.plot(mt, dist, lw=0.9)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("tip to mouth estimate (m)")
        ax.set_title("transfer approach profile")
        path = stem.with_name(stem.name + "_transfer.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def emit_all(runtime, outcomes: list, scenario: dict, report_path, plots: bool = True):
    """Report JSON + telemetry CSV + figures next to the report path."""
    report = build_report(runtime, outcomes, scenario)
    report_path = Path(report_path)
    digest = write_report(report, report_path)
    stem = report_path.with_suffix("")
    write_telemetry_csv(runtime.csv_rows, stem.with_name(stem.name + "_telemetry.csv"))
    figures = render_figures(runtime, report, stem) if plots else []
    return report, digest, figures
