import logging
from collections.abc import Generator
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, cast, get_args

import numpy as np
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress
from rich.table import Table

from consdetect.core.artifacts.manager import ArtifactStore
from consdetect.core.errors import ConfigError, ConsensusDetectError
from consdetect.core.gaussian import RngSeed
from consdetect.core.models import ExperimentConfig, TheoryConfig
from consdetect.core.operations import (
    THEORY_COLUMNS,
    GraphService,
    SimulationOutcome,
    SimulationService,
    SweepService,
    SweepVariable,
    TheoryService,
    TheoryVariable,
    load_document,
)

app = typer.Typer()

console = Console()
err_console = Console(stderr=True)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging")) -> None:
    """Distributed detection with running consensus: graphs, theory, simulation and sweeps."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@contextmanager
def _reported_errors() -> Generator[None, None, None]:
    """Turn library failures into a red status line and the matching exit code."""
    try:
        yield
    except ValidationError as e:
        console.print(f"❌ Invalid configuration: {e}", style="red")
        raise typer.Exit(2) from e
    except ConsensusDetectError as e:
        console.print(f"❌ {e}", style="red")
        raise typer.Exit(e.exit_code) from e


def parse_grid(text: str) -> list[float]:
    """Parse `a,b,c` or `start:stop:num` (inclusive, evenly spaced)."""
    text = text.strip()
    if not text:
        return []
    try:
        if ":" in text:
            start, stop, num = text.split(":")
            return [float(v) for v in np.linspace(float(start), float(stop), int(num))]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        msg = f"cannot parse grid {text!r}"
        raise ConfigError(msg) from err


DEFAULT_THEORY_GRIDS = {"p": "0:1:101", "r": "0:1:101", "q": "0.01:1:100"}


@app.command("graph-gen")
def graph_gen(
    n: int = typer.Option(..., "--n", help="Number of sensors"),
    radius: Optional[float] = typer.Option(None, "--radius", help="Connection radius on the unit square"),
    target_m: Optional[int] = typer.Option(None, "--target-m", help="Bisect the radius to hit this edge count"),
    q: float = typer.Option(1.0, "--q", help="Formation probability of every edge"),
    seed: int = typer.Option(0, "--seed", help="Master seed for node positions"),
    pendant: Optional[int] = typer.Option(None, "--pendant", help="Node attached to the anchor only"),
    anchor: Optional[int] = typer.Option(None, "--anchor", help="The pendant's only neighbor"),
    q_pendant: float = typer.Option(0.05, "--q-pendant", help="Formation probability of the pendant link"),
    q_rest: float = typer.Option(0.8, "--q-rest", help="Formation probability of the other links"),
    output: Path = typer.Option(Path("supergraph.json"), "--output", "-o", help="Where to write the supergraph"),
) -> None:
    """Generate a geometric (optionally pendant) supergraph and write it as JSON."""
    service = GraphService()
    rng_seed = RngSeed(master_seed=seed)
    with _reported_errors():
        if pendant is not None:
            if anchor is None:
                msg = "--pendant needs --anchor"
                raise ConfigError(msg)
            graph = service.pendant(n, pendant, anchor, q_pendant, q_rest, rng_seed, radius=radius, target_m=target_m)
        else:
            graph = service.geometric(n, q, rng_seed, radius=radius, target_m=target_m)
        service.save(graph, output)

    summary = service.summary(graph)
    degrees = summary.degrees
    console.print(f"🕸️  Supergraph with N={summary.n}, M={summary.m}", style="bold green")
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Min degree", justify="center")
    table.add_column("Mean degree", justify="center")
    table.add_column("Max degree", justify="center")
    table.add_column("Connected", justify="center")
    table.add_column("Isolated", style="yellow")
    table.add_row(
        str(min(degrees)),
        f"{float(np.mean(degrees)):.2f}",
        str(max(degrees)),
        "[green]✓[/green]" if summary.connected else "[red]✗[/red]",
        ", ".join(map(str, summary.isolated)) or "—",
    )
    console.print(table)
    console.print(f"✅ Wrote {output}", style="green")


@app.command("theory")
def theory(
    config: Path = typer.Argument(..., help="Theory config (JSON)"),
    output: Path = typer.Option(Path("theory.csv"), "--output", "-o", help="CSV to write"),
    variable: Optional[str] = typer.Option(None, "--variable", help="Swept quantity: p, q or r"),
    grid: Optional[str] = typer.Option(None, "--grid", help="Values as a,b,c or start:stop:num"),
    overrides: Optional[list[str]] = typer.Option(None, "--set", help="Override a config field (dotted.key=value)"),
) -> None:
    """Tabulate decay rates, bounds and thresholds over a parameter grid."""
    with _reported_errors():
        cfg = load_document(config, TheoryConfig, overrides or [])
        service = TheoryService(cfg)
        var = variable or service.default_variable()
        if var not in get_args(TheoryVariable):
            msg = f"unknown theory variable {var!r}"
            raise ConfigError(msg)
        values = parse_grid(grid if grid is not None else DEFAULT_THEORY_GRIDS[var])
        rows = service.rows(cast(TheoryVariable, var), values)
        store = ArtifactStore(output.parent, {"config_hash": cfg.config_hash(), "master_seed": cfg.master_seed})
        store.write_csv(output.name, (var, *THEORY_COLUMNS), (row.cells() for row in rows))

    console.print(f"📈 {len(rows)} theory rows over {var}", style="bold green")
    first = rows[0]
    if first.p_star is not None:
        console.print(f"Optimality threshold p* = {first.p_star:.4f}")
    if first.log_r_threshold is not None:
        console.print(f"|log r| threshold = {first.log_r_threshold:.6g}")
    console.print(f"✅ Wrote {output}", style="green")


def _render_rates(outcome: SimulationOutcome) -> None:
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Sensor", justify="center", style="cyan")
    table.add_column("Empirical rate", justify="right")
    table.add_column("± stderr", justify="right", style="dim")
    table.add_column("Theory", justify="right")
    table.add_column("Regime", style="yellow")
    table.add_column("◉", justify="center")
    for row in outcome.comparison.sensors:
        if row.passed is None:
            mark = "[yellow]●[/yellow]"
        elif row.passed:
            mark = "[green]✓[/green]"
        else:
            mark = "[red]✗[/red]"
        table.add_row(
            "avg" if row.sensor == 0 else str(row.sensor),
            "censored" if row.empirical_rate is None else f"{row.empirical_rate:.5f}",
            "—" if row.stderr is None else f"{row.stderr:.1e}",
            f"{row.theory_rate:.5f}",
            row.regime,
            mark,
        )
    console.print(table)


def _load_experiment(config: Path, overrides: Optional[list[str]]) -> ExperimentConfig:
    return load_document(config, ExperimentConfig, overrides or [])


@app.command("simulate")
def simulate(
    config: Path = typer.Argument(..., help="Experiment config (JSON)"),
    output_dir: Path = typer.Option(Path("run"), "--output-dir", "-o", help="Directory for CSV and JSON outputs"),
    workers: int = typer.Option(1, "--workers", "-w", help="Worker processes"),
    trajectories: int = typer.Option(0, "--trajectories", help="Dump full trajectories of the first n H0 paths"),
    overrides: Optional[list[str]] = typer.Option(None, "--set", help="Override a config field (dotted.key=value)"),
) -> None:
    """Run a Monte Carlo experiment and compare fitted rates with theory."""
    with _reported_errors():
        cfg = _load_experiment(config, overrides)
        console.print(f"🎲 Simulating {cfg.paths_per_hypothesis} paths to k={cfg.k_max}", style="bold green")
        total = cfg.paths_per_hypothesis * (2 if cfg.estimate_both_hypotheses else 1)
        with Progress(console=console, transient=True) as progress:
            task = progress.add_task("paths", total=total)
            service = SimulationService(workers=workers, progress=lambda done: progress.advance(task, done))
            outcome = service.run(cfg, output_dir, trajectories=trajectories)

    _render_rates(outcome)
    console.print(f"✅ Wrote {', '.join(outcome.manifest.outputs)} to {output_dir}", style="green")


@app.command("sweep")
def sweep(
    config: Path = typer.Argument(..., help="Base experiment config (JSON)"),
    variable: str = typer.Option(..., "--variable", help="Swept quantity: q, p or q_pendant"),
    grid: str = typer.Option(..., "--grid", help="Values as a,b,c or start:stop:num"),
    output_dir: Path = typer.Option(Path("sweep"), "--output-dir", "-o", help="Directory for per-point runs"),
    workers: int = typer.Option(1, "--workers", "-w", help="Worker processes"),
    pendant: Optional[int] = typer.Option(None, "--pendant", help="Pendant node for q_pendant sweeps"),
    anchor: Optional[int] = typer.Option(None, "--anchor", help="Anchor node for q_pendant sweeps"),
    overrides: Optional[list[str]] = typer.Option(None, "--set", help="Override a config field (dotted.key=value)"),
) -> None:
    """Run one experiment per grid value and merge the fitted rates."""
    with _reported_errors():
        if variable not in get_args(SweepVariable):
            msg = f"unknown sweep variable {variable!r}"
            raise ConfigError(msg)
        base = _load_experiment(config, overrides)
        values = parse_grid(grid)
        if not values:
            msg = "the sweep grid is empty"
            raise ConfigError(msg)
        console.print(f"🔁 Sweeping {variable} over {len(values)} values", style="bold green")
        service = SweepService(SimulationService(workers=workers))
        points = service.run(base, cast(SweepVariable, variable), values, output_dir, pendant=pendant, anchor=anchor)

    table = Table(show_header=True, header_style="bold magenta")
    table.add_column(variable, justify="right", style="cyan")
    table.add_column("r", justify="right", style="dim")
    table.add_column("Mean rate", justify="right")
    table.add_column("Theory", justify="right")
    table.add_column("Regime", style="yellow")
    for point in points:
        report = point.outcome.report
        average = point.outcome.comparison.sensors[0]
        table.add_row(
            f"{point.value:g}",
            "—" if report.r is None else f"{report.r:.4f}",
            "censored" if average.empirical_rate is None else f"{average.empirical_rate:.5f}",
            f"{report.theoretical_rate_or_bound:.5f}",
            report.regime,
        )
    console.print(table)
    console.print(f"✅ Wrote sweep.csv and sweep_summary.csv to {output_dir}", style="green")
