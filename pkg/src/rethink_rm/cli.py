"""The command-line app of the engine."""

import json
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Annotated, Any

import typer
from loguru import logger
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from rethink_rm.config import Config
from rethink_rm.datasets import LoadedDataset, load_dataset, load_mixture
from rethink_rm.diffusion import (
    allocation_profile,
    concentration_metrics,
    selection_frequencies,
    selection_frequencies_by_domain,
    write_profile,
)
from rethink_rm.errors import ConfigError, DataIOError, EngineError, ExitCode
from rethink_rm.evaluation import EvalReport, evaluate_bon, evaluate_pairwise
from rethink_rm.factories import AttributorFactory, BackendFactory
from rethink_rm.fileutils import build_artifact_path, write_json, write_jsonl
from rethink_rm.model import (
    AttributorKind,
    DeliberationTrace,
    EngineConfig,
    Rollout,
    RewardVariant,
)
from rethink_rm.orchestrator import RolloutOrchestrator
from rethink_rm.parsers import parse_trace
from rethink_rm.rewards import composite_reward
from rethink_rm.toy import ToyEnvironment, ToyPolicy
from rethink_rm.training import train_loop

app = typer.Typer(no_args_is_help=True)
console = Console()
err_console = Console(stderr=True)


def _configure_logging(level: str) -> None:
    logger.configure(
        handlers=[
            {"sink": RichHandler(markup=True), "format": "{message}", "level": level}
        ]
    )


@contextmanager
def _exit_on_error() -> Iterator[None]:
    """Turn engine errors into their exit statuses."""
    try:
        yield
    except EngineError as e:
        err_console.print(f"[bold red]{type(e).__name__}[/bold red]: {escape(str(e))}")
        raise typer.Exit(code=int(e.exit_code)) from e


def _config(ctx: typer.Context) -> EngineConfig:
    return ctx.ensure_object(dict)["config"]


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[
        Path | None, typer.Option("--config", help="Engine config JSON file.")
    ] = None,
    seed: Annotated[int | None, typer.Option(help="Override the run seed.")] = None,
    log_level: Annotated[
        str | None, typer.Option("--log-level", help="Log level, e.g. DEBUG.")
    ] = None,
    overrides: Annotated[
        list[str] | None,
        typer.Option("--set", help="Override a config value: section.key=value."),
    ] = None,
) -> None:
    """Branch-and-rethink reward modeling: validate, score, train and evaluate."""
    _configure_logging((log_level or "INFO").upper())
    with _exit_on_error():
        resolved = Config.load_from_file(
            config, overrides or (), seed=seed, log_level=log_level
        )
    _configure_logging(resolved.log_level.upper())
    ctx.ensure_object(dict)["config"] = resolved


# --- trace files ---------------------------------------------------------------


def _read_json(path: Path) -> Any:  # noqa: ANN401
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        msg = f"Cannot read {path}: {e}"
        raise DataIOError(msg) from e
    except json.JSONDecodeError as e:
        msg = f"{path} is not valid JSON: {e}"
        raise DataIOError(msg) from e


def _trace_fields(data: Any, source: str) -> tuple[str, str]:  # noqa: ANN401
    if not isinstance(data, dict) or not isinstance(data.get("branch"), str):
        msg = f"{source} must hold a JSON object with a 'branch' string."
        raise DataIOError(msg)
    rethink = data.get("rethink", "")
    if not isinstance(rethink, str):
        msg = f"{source}: 'rethink' must be a string."
        raise DataIOError(msg)
    return data["branch"], rethink


def _parse(config: EngineConfig, branch: str, rethink: str) -> DeliberationTrace:
    return parse_trace(
        branch,
        rethink,
        config.trace.criteria_set(),
        scaled=config.reward.variant == RewardVariant.SCALED_SCORE,
    )


@app.command()
def validate(
    ctx: typer.Context,
    trace_file: Annotated[Path, typer.Argument(help="Trace JSON file.")],
) -> None:
    """Check a stored two-turn trace and list its format violations."""
    config = _config(ctx)
    with _exit_on_error():
        branch, rethink = _trace_fields(_read_json(trace_file), str(trace_file))
    trace = _parse(config, branch, rethink)

    if trace.well_formed:
        console.print(
            f"{escape(str(trace_file))}: well-formed, verdict {trace.verdict}"
        )
        return
    for violation in trace.violations:
        console.print(str(violation), markup=False)
    raise typer.Exit(code=ExitCode.DOMAIN_FAILURE)


@app.command()
def reward(
    ctx: typer.Context,
    trace_file: Annotated[Path, typer.Argument(help="Trace JSON file.")],
    label: Annotated[
        int | None, typer.Option(help="Gold label; overrides the file's 'label'.")
    ] = None,
) -> None:
    """Compute the reward terms of a stored trace."""
    config = _config(ctx)
    with _exit_on_error():
        data = _read_json(trace_file)
        branch, rethink = _trace_fields(data, str(trace_file))
        gold = label if label is not None else data.get("label")
        if gold not in (1, 2):
            msg = "A gold label of 1 or 2 is needed, from --label or the file."
            raise ConfigError(msg)

    trace = _parse(config, branch, rethink)
    breakdown = composite_reward(
        trace, gold, config.reward, truth_score=data.get("score_1")
    )
    console.print_json(
        data={
            "well_formed": trace.well_formed,
            "verdict": trace.verdict,
            "violations": [str(v) for v in trace.violations],
            "format": breakdown.format,
            "outcome": breakdown.outcome,
            "composite": breakdown.composite,
            "turn1_reward": breakdown.turn1_reward,
            "turn2_reward": breakdown.turn2_reward,
        }
    )


# --- training ------------------------------------------------------------------


@app.command("train-toy")
def train_toy(
    ctx: typer.Context,
    out_dir: Annotated[Path, typer.Option(help="Directory for run artifacts.")] = Path(
        "runs"
    ),
) -> None:
    """Train the toy judge policy with two-turn GRPO and write its history."""
    config = _config(ctx)
    env = ToyEnvironment.from_config(config.grpo.environment, config.environment_seed)
    policy = ToyPolicy.initial(
        env.context_dim, config.training_seed, config.grpo.init_scale
    )
    history = train_loop(
        env, policy, config.reward, config.grpo, engine_config=config
    )

    with _exit_on_error():
        write_jsonl(
            build_artifact_path(out_dir, "train-toy", "jsonl", tag="history"),
            (record.to_json() for record in history.steps),
            config,
        )
        write_json(
            build_artifact_path(out_dir, "train-toy", "json", tag="summary"),
            {
                "steps": len(history.steps),
                "initial": asdict(history.initial) if history.initial else None,
                "final": asdict(history.final) if history.final else None,
            },
            config,
        )

    if history.final is not None:
        console.print(
            f"Final held-out accuracy {history.final.accuracy:.4f}, "
            f"format-violation rate {history.final.format_violation_rate:.4f}"
        )


# --- datasets and backends -----------------------------------------------------


def _load(datasets: list[Path], exclude: list[str] | None) -> LoadedDataset:
    if len(datasets) == 1 and not exclude:
        return load_dataset(datasets[0])
    return load_mixture(datasets, exclude or ())


def _orchestrator(config: EngineConfig) -> RolloutOrchestrator:
    return RolloutOrchestrator(config, BackendFactory(config).build())


def _rollout_row(rollout: Rollout) -> dict[str, Any]:
    trace = rollout.trace
    return {
        "item_id": rollout.item_id,
        "rollout_index": rollout.rollout_index,
        "label": rollout.label,
        "branch": trace.branch_raw,
        "rethink": trace.rethink_raw,
        "verdict": trace.verdict,
        "well_formed": trace.well_formed,
        "violations": [str(v) for v in trace.violations],
        "composite_reward": rollout.rewards.composite,
        "records": [
            {
                "turn": record.turn.value,
                "reward": record.reward,
                "token_count": record.token_count,
                "approximate_tokens": record.approximate_tokens,
                "truncated": record.truncated,
            }
            for record in rollout.records
        ],
    }


@app.command()
def rollout(
    ctx: typer.Context,
    dataset: Annotated[Path, typer.Argument(help="Line-delimited JSON dataset.")],
    k: Annotated[
        int | None,
        typer.Option("-k", help="Rollouts per item; defaults to rollout.group_size."),
    ] = None,
    out_dir: Annotated[Path, typer.Option(help="Directory for run artifacts.")] = Path(
        "runs"
    ),
) -> None:
    """Judge every pairwise item K times and archive the traces."""
    config = _config(ctx)
    k = k if k is not None else config.rollout.group_size
    with _exit_on_error():
        if k < 1:
            msg = f"-k must be at least 1, got {k}."
            raise ConfigError(msg)
        items = load_dataset(dataset).pairwise
        orchestrator = _orchestrator(config)
        try:
            if k == 1:
                rollouts = orchestrator.rollout_items(items)
            else:
                groups = orchestrator.rollout_batch(items, k)
                rollouts = [r for group in groups for r in group.rollouts]
        finally:
            orchestrator.backend.close()

        path = write_jsonl(
            build_artifact_path(out_dir, dataset.stem, "jsonl", tag="rollouts"),
            (_rollout_row(r) for r in rollouts),
            config,
        )
    console.print(f"Archived {len(rollouts)} traces to {escape(str(path))}")


def _eval_table(report: EvalReport) -> Table:
    table = Table(title="Preference accuracy")
    table.add_column("group")
    table.add_column("accuracy", justify="right")
    table.add_column("items", justify="right")
    table.add_row("overall", f"{report.overall_accuracy:.4f}", str(report.n_items))
    table.add_row("single pass", f"{report.single_pass_accuracy:.4f}", "")
    for prefix, groups in (
        ("domain", report.per_domain),
        ("difficulty", report.per_difficulty),
        ("source", report.per_source),
    ):
        for name, group in groups.items():
            table.add_row(
                f"{prefix}: {name}", f"{group.accuracy:.4f}", str(group.count)
            )
    swap = (
        "skipped"
        if report.swap_consistency is None
        else f"{report.swap_consistency:.4f}"
    )
    table.add_row("swap consistency", swap, "")
    table.add_row("malformed rate", f"{report.malformed_rate:.4f}", "")
    return table


@app.command("eval")
def eval_(
    ctx: typer.Context,
    datasets: Annotated[
        list[Path], typer.Argument(help="One or more line-delimited JSON datasets.")
    ],
    exclude: Annotated[
        list[str] | None,
        typer.Option(help="Leave out a source (file stem) of a mixture."),
    ] = None,
    out_dir: Annotated[Path, typer.Option(help="Directory for run artifacts.")] = Path(
        "runs"
    ),
) -> None:
    """Evaluate preference accuracy on pairwise and Best-of-N items."""
    config = _config(ctx)
    with _exit_on_error():
        loaded = _load(datasets, exclude)
        orchestrator = _orchestrator(config)
        try:
            pairwise = (
                evaluate_pairwise(loaded.pairwise, orchestrator, config.eval)
                if loaded.pairwise
                else None
            )
            best_of_n = (
                evaluate_bon(loaded.best_of_n, orchestrator, config.eval)
                if loaded.best_of_n
                else None
            )
        finally:
            orchestrator.backend.close()

        name = datasets[0].stem if len(datasets) == 1 else "mixture"
        path = write_json(
            build_artifact_path(out_dir, name, "json", tag="eval"),
            {
                "pairwise": pairwise.to_json() if pairwise else None,
                "best_of_n": best_of_n.to_json() if best_of_n else None,
                "rejects": [asdict(reject) for reject in loaded.rejects],
            },
            config,
        )

    if pairwise is not None:
        console.print(_eval_table(pairwise))
    if best_of_n is not None:
        console.print(f"Best-of-N accuracy {best_of_n.accuracy:.4f}")
    console.print(f"Report written to {escape(str(path))}")


# --- analysis ------------------------------------------------------------------


def _read_traces(
    path: Path, config: EngineConfig
) -> tuple[list[DeliberationTrace], list[str | None]]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        msg = f"Cannot read {path}: {e}"
        raise DataIOError(msg) from e

    traces, domains = [], []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            msg = f"{path}:{number} is not valid JSON: {e}"
            raise DataIOError(msg) from e
        branch, rethink = _trace_fields(data, f"{path}:{number}")
        traces.append(_parse(config, branch, rethink))
        domains.append(data.get("domain"))
    if not traces:
        msg = f"{path} holds no traces."
        raise DataIOError(msg)
    return traces, domains


@app.command()
def analyze(
    ctx: typer.Context,
    traces_file: Annotated[
        Path, typer.Argument(help="JSON-lines traces, e.g. a rollout archive.")
    ],
    out_dir: Annotated[Path, typer.Option(help="Directory for run artifacts.")] = Path(
        "runs"
    ),
) -> None:
    """Profile how trace tokens are spread over the evaluation dimensions."""
    config = _config(ctx)
    criteria = config.trace.criteria_set()
    with _exit_on_error():
        traces, domains = _read_traces(traces_file, config)
        orchestrator = (
            _orchestrator(config)
            if config.analyzer.attributor == AttributorKind.EXTERNAL_JUDGE
            else None
        )
        attributor = AttributorFactory(config).build(orchestrator)
        profile = allocation_profile(traces, criteria, attributor)
        metrics = concentration_metrics(profile, config.analyzer.top_k)
        selection = selection_frequencies(traces, criteria)
        csv_path, json_path = write_profile(
            out_dir, traces_file.stem, profile, metrics, criteria, config, selection
        )
        if any(domains):
            write_json(
                build_artifact_path(out_dir, traces_file.stem, "json", tag="selection"),
                {
                    "by_domain": selection_frequencies_by_domain(
                        traces, domains, criteria
                    )
                },
                config,
            )

    table = Table(title="Token allocation")
    table.add_column("dimension")
    table.add_column("share", justify="right")
    table.add_column("selected", justify="right")
    for criterion in criteria:
        table.add_row(
            criterion.name,
            f"{profile.shares[criterion.id]:.4f}",
            f"{selection[criterion.name]:.4f}",
        )
    table.add_row("unattributed", f"{profile.unattributed:.4f}", "")
    console.print(table)
    console.print(
        f"top-{metrics.k} share {metrics.top_k_share:.4f}, "
        f"entropy {metrics.entropy:.4f}"
    )
    console.print(f"Wrote {escape(str(csv_path))} and {escape(str(json_path))}")
