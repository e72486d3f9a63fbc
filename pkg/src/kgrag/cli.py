"""Command-line pipeline driver.

Stage order: ingest -> build-graph -> index -> query/eval/serve. Each
command writes its artifacts under the configured paths and exits nonzero
on error with a machine-readable ``{"error": ...}`` line on stderr.

Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 missing prerequisite
stage, 4 stale artifacts.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .engine import Engine, EngineConfig, EngineError, MissingStageError, StaleStateError
from .evalkit import load_dataset
from .gateway import GatewayError

logger = logging.getLogger(__name__)


def _fail(code: str, message: str, exit_code: int = 1) -> None:
    click.echo(json.dumps({"error": {"code": code, "message": message}}), err=True)
    sys.exit(exit_code)


def _run(fn):
    try:
        return fn()
    except MissingStageError as exc:
        _fail(exc.code, str(exc), 3)
    except StaleStateError as exc:
        _fail(exc.code, str(exc), 4)
    except EngineError as exc:
        _fail(exc.code, str(exc), 1)
    except GatewayError as exc:
        _fail("gateway_error", str(exc), 1)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    default=None,
    help="YAML config file (defaults to ./kgrag.yaml when present).",
)
@click.pass_context
def main(ctx: click.Context, config_path: Path | None) -> None:
    """Knowledge-graph-guided retrieval QA over structured documents."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if config_path is None and Path("kgrag.yaml").exists():
        config_path = Path("kgrag.yaml")
    ctx.obj = Engine(EngineConfig.load(config_path))


@main.command()
@click.argument("path", type=click.Path(exists=True, path_type=Path))
@click.pass_obj
def ingest(engine: Engine, path: Path) -> None:
    """Parse documents (file or directory of .md/.json) into the corpus."""
    out = _run(lambda: engine.ingest(path))
    click.echo(json.dumps(out, sort_keys=True))


@main.command("build-graph")
@click.pass_obj
def build_graph(engine: Engine) -> None:
    """Build the concept and instance knowledge graphs."""
    out = _run(engine.build_graph)
    click.echo(json.dumps(out, sort_keys=True))


@main.command()
@click.pass_obj
def index(engine: Engine) -> None:
    """Embed all chunks into the vector index."""
    out = _run(engine.build_index)
    click.echo(json.dumps(out, sort_keys=True))


@main.command()
@click.argument("question")
@click.option("--session", "session_id", default=None, help="Persistent session id.")
@click.option("--show-trace", is_flag=True, help="Print the retrieval trace JSON.")
@click.option("--allow-stale", is_flag=True, help="Query even if artifacts are stale.")
@click.pass_obj
def query(engine: Engine, question: str, session_id: str | None, show_trace: bool, allow_stale: bool) -> None:
    """Answer one question against the built corpus."""
    result = _run(lambda: engine.ask(question, session_id=session_id, allow_stale=allow_stale))
    payload = {
        "answer": result.answer.text,
        "citations": result.answer.citations,
        "degradation_flags": result.answer.degradation_flags,
        "query_id": result.query_id,
    }
    if show_trace:
        payload["trace"] = result.usc.trace_dict()
    click.echo(json.dumps(payload, sort_keys=True))


@main.command("eval")
@click.argument("dataset", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None,
              help="Directory for report.json / report.md (defaults to the graph dir).")
@click.pass_obj
def eval_command(engine: Engine, dataset: Path, out_dir: Path | None) -> None:
    """Run the metric suite over a JSONL dataset of {question, ground_truth}."""
    target = out_dir if out_dir is not None else engine.graph_dir
    report = _run(lambda: engine.evaluate(load_dataset(dataset), out_dir=target))
    click.echo(json.dumps(report.to_dict(), sort_keys=True))


@main.command()
@click.pass_obj
def status(engine: Engine) -> None:
    """Show corpus/graph/index counts and staleness."""
    click.echo(json.dumps(_run(engine.status), sort_keys=True))


@main.command()
@click.pass_obj
def serve(engine: Engine) -> None:
    """Run the HTTP API."""
    import uvicorn

    from .server import create_app

    uvicorn.run(create_app(engine), host=engine.config.host, port=engine.config.port)


if __name__ == "__main__":
    main()
