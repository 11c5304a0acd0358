"""Command-line interface: experiments, artifact building, benchmarks."""

from __future__ import annotations

import json

import click
import numpy as np

from .covertree import CoverTree, build as build_covertree
from .dictionary import (
    ParameterGrid,
    generate_fingerprints,
    load_dictionary,
    save_dictionary,
)
from .harness import run_experiment


def _grid_from_spec(spec):
    def axis(v):
        return [tuple(x) if isinstance(x, list) else x for x in v]
    return ParameterGrid(axis(spec["t1"]), axis(spec["t2"]),
                         axis(spec["b0"]))


@click.group()
def main():
    """Cover-tree accelerated dictionary-constrained reconstruction."""


@main.command()
@click.argument("config", type=click.Path(exists=True))
@click.option("--output-root", default=None,
              help="Directory for run outputs (default: runs/ or "
                   "COVERBLIP_OUTPUT_ROOT).")
def run(config, output_root):
    """Run the experiment described by CONFIG (JSON)."""
    out = run_experiment(config, output_root=output_root)
    click.echo(f"run complete: {out}")


@main.group(name="dict")
def dict_():
    """Fingerprint dictionary artifacts."""


@dict_.command("build")
@click.argument("grid_json", type=click.Path(exists=True))
@click.argument("output", type=click.Path())
def dict_build(grid_json, output):
    """Generate a dictionary from a grid spec JSON and save it."""
    with open(grid_json) as fh:
        spec = json.load(fh)
    d = generate_fingerprints(_grid_from_spec(spec), spec["tr_ms"],
                              spec["L"])
    save_dictionary(d, output)
    click.echo(f"dictionary: d={d.d} L={d.L} tr_ms={d.tr_ms} -> {output}")


@dict_.command("inspect")
@click.argument("path", type=click.Path(exists=True))
def dict_inspect(path):
    """Print a dictionary's header and the first lookup rows."""
    d = load_dictionary(path)
    click.echo(f"d={d.d} L={d.L} tr_ms={d.tr_ms}")
    click.echo("j,t1_ms,t2_ms,b0_hz")
    for j in range(min(5, d.d)):
        t1, t2, b0 = d.lookup(j)
        click.echo(f"{j},{t1:g},{t2:g},{b0:g}")


@main.group()
def tree():
    """Cover tree artifacts."""


@tree.command("build")
@click.argument("dictionary", type=click.Path(exists=True))
@click.argument("output", type=click.Path())
def tree_build(dictionary, output):
    """Build a cover tree over a saved dictionary's atoms."""
    d = load_dictionary(dictionary)
    t = build_covertree(d.atoms)
    t.save(output)
    click.echo(f"tree: n={t.n_points} sigma={t.sigma:g} "
               f"i_max={t.i_max} -> {output}")


@tree.command("check")
@click.argument("path", type=click.Path(exists=True))
def tree_check(path):
    """Verify the structural invariants of a saved tree."""
    t = CoverTree.load(path)
    violations = t.verify_invariants()
    if violations:
        for v in violations:
            click.echo(f"VIOLATION: {v}")
        raise SystemExit(1)
    click.echo(f"ok: {t.n_points} points, all invariants hold")


@main.group()
def bench():
    """Micro-benchmarks."""


@bench.command("anns")
@click.argument("dictionary", type=click.Path(exists=True))
@click.option("--epsilons", default="0,0.4,1.6", show_default=True)
@click.option("--queries", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
def bench_anns(dictionary, epsilons, queries, seed):
    """Mean search cost per query versus the brute-force cost d."""
    d = load_dictionary(dictionary)
    t = build_covertree(d.atoms)
    rng = np.random.default_rng(seed)
    qs = rng.standard_normal((queries, d.L)) + 1j * rng.standard_normal(
        (queries, d.L))
    qs /= np.linalg.norm(qs, axis=1)[:, None]
    click.echo("epsilon,mean_cost,brute_cost")
    for eps in (float(e) for e in epsilons.split(",")):
        cost = np.mean([t.ann_search(q, eps).cost for q in qs])
        click.echo(f"{eps:g},{cost:.1f},{d.d}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP service (requires uvicorn)."""
    import uvicorn

    from .service import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
