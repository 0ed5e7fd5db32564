"""Command line: `feedsim serve` (local control service), `feedsim run`
(headless scripted meal with report + figures), `feedsim dataset`, and the
`acquire-train` entry point for building action libraries offline."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import acquire as acq
from .config import ConfigError, load_config, watchdog_config
from .report import emit_all
from .runtime import FeedingRuntime, ParamSet, ParamStore, run_script
from .scenario import ScenarioError, load_scenario, nominal_meal_scenario


def _runtime_from_config(scenario: dict, cfg: dict) -> FeedingRuntime:
    library = None
    bandit = None
    checkpoint = cfg.get("bandit_checkpoint")
    if checkpoint and Path(checkpoint).exists():
        data = json.loads(Path(checkpoint).read_text())
        bandit = acq.bandit_from_json(data["bandit"])
        library = acq.ActionLibrary.from_json(data["library"])
    rt = FeedingRuntime(scenario, violation_log_path=cfg.get("violation_log"),
                        library=library, bandit=bandit,
                        watchdog_cfg=watchdog_config(cfg))
    rt.params = ParamStore(ParamSet(
        speed_scale=cfg["speed_scale"], transfer_mode=cfg["transfer_mode"],
        outside_distance=cfg["outside_distance"], gate_f_max=cfg["gate_f_max"],
        gate_tau_max=cfg["gate_tau_max"]))
    return rt


@click.group()
def main():
    """Deterministic robot-assisted feeding simulator."""


@main.command()
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), default=None,
              help="Scenario JSON; defaults to the nominal 3-bite meal.")
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--pace", type=click.Choice(["real", "fast"]), default="real",
              show_default=True, help="Wall-clock pacing of the 100 Hz loop.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Config JSON (also via FEEDSIM_CONFIG).")
def serve(scenario_path, port, host, pace, config_path):
    """Run the local control service (HTTP + WebSocket telemetry)."""
    import uvicorn

    from .api import create_app

    try:
        cfg = load_config(config_path)
        scenario = (load_scenario(scenario_path) if scenario_path
                    else nominal_meal_scenario())
    except (ScenarioError, ConfigError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    runtime = _runtime_from_config(scenario, cfg)
    app = create_app(runtime, pace=pace)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--report", "report_path", type=click.Path(), required=True)
@click.option("--plots/--no-plots", default=True, show_default=True,
              help="Render figures next to the report.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--bandit-checkpoint", type=click.Path(), default=None,
              help="Load bandit state before the meal and save it after.")
def run(scenario_path, seed, report_path, plots, config_path, bandit_checkpoint):
    """Execute a scripted scenario headlessly and write the report bundle."""
    try:
        cfg = load_config(config_path)
        if bandit_checkpoint:
            cfg["bandit_checkpoint"] = bandit_checkpoint
        scenario = load_scenario(scenario_path)
    except (ScenarioError, ConfigError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    if seed is not None:
        scenario["seed"] = seed
    try:
        runtime = _runtime_from_config(scenario, cfg)
        outcomes = run_script(runtime, scenario.get("script", []))
        report, digest, figures = emit_all(runtime, outcomes, scenario,
                                           report_path, plots=plots)
    except Exception as e:
        click.echo(f"internal error: {e}", err=True)
        sys.exit(1)
    if bandit_checkpoint:
        Path(bandit_checkpoint).write_text(json.dumps({
            "bandit": acq.bandit_to_json(runtime.bandit),
            "library": runtime.library.to_json(),
        }))
    meal = report["meal"]
    click.echo(f"report: {report_path}")
    click.echo(f"report_hash: {digest}")
    for fig in figures:
        click.echo(f"figure: {fig}")
    click.echo(f"bites consumed: {meal['bites_consumed']}  "
               f"acquisitions: {meal['acquisition_successes']}/{meal['acquisition_attempts']}  "
               f"transfers ok: {meal['transfers_ok']}")
    sys.exit(0)


@main.command()
@click.option("--n", default=500, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def dataset(n, seed, out):
    """Generate the synthetic expert trajectory dataset."""
    ds = acq.generate_expert_dataset(n, seed)
    Path(out).write_text(json.dumps(ds.to_json()))
    click.echo(f"wrote {n} trajectories to {out} (hash {ds.content_hash()})")


@click.command()
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), required=True)
@click.option("--k", default=11, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def acquire_train(dataset_path, k, seed, out):
    """Cluster an expert dataset into a discrete action library."""
    ds = acq.TrajectoryDataset.from_json(json.loads(Path(dataset_path).read_text()))
    try:
        library = acq.k_medoids(ds, k=k, seed=seed)
    except acq.KTooLarge as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    Path(out).write_text(json.dumps(library.to_json(), indent=2))
    click.echo(f"wrote {len(library)} actions to {out} "
               f"(cost {library.provenance['total_cost']:.4f})")


if __name__ == "__main__":
    main()
