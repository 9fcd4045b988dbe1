"""Uniform-quantization sweep over (bits, components, block groups, layer types).

Runs the full non-empty subset grid on the default toy pipeline, writes the
results CSV and a score-vs-bpw SVG per task. The full grid is 589 rows per
task and seed; --quick restricts it to whole-component cells for a fast look.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mmqlab.cli import render_plot_svg
from mmqlab.experiments import GridSpec, pareto_frontier, run_uniform_grid, save_results
from mmqlab.pipeline import BlockGroup, LayerType, PipelineSpec, TaskKind
from mmqlab.tasks import make_probe_set


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="out", type=Path)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--eval-pairs", type=int, default=16)
    parser.add_argument("--quick", action="store_true", help="whole-component cells only")
    args = parser.parse_args()

    spec = PipelineSpec(seed=0)
    probes = make_probe_set(11, max(args.eval_pairs, 16))
    grid = GridSpec(
        tasks=(TaskKind.RETRIEVAL, TaskKind.CAPTION, TaskKind.VQA),
        seeds=(args.seed,),
        eval_pairs=args.eval_pairs,
        group_subsets=((BlockGroup.FRONT, BlockGroup.MIDDLE, BlockGroup.END),) if args.quick else None,
        layer_type_subsets=((LayerType.ATTN, LayerType.FF),) if args.quick else None,
    )
    print(f"running uniform grid (quick={args.quick}) ...")
    table = run_uniform_grid(spec, probes, grid)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = args.out_dir / "uniform_grid.csv"
    save_results(table, csv_path)
    print(f"wrote {len(table.rows)} rows to {csv_path}")
    for task in grid.tasks:
        svg_path = args.out_dir / f"uniform_{task.value}.svg"
        svg_path.write_text(render_plot_svg(table, task))
        frontier = pareto_frontier(table, task)
        best = ", ".join(f"({r.bpw:.2f} bpw, {r.score:.3f})" for r in frontier.rows[:5])
        print(f"{task.value}: pareto frontier starts {best} -> {svg_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
