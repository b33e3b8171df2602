"""Heatmap rendering: teacher layers on the x axis, student layers on
the y axis, a color bar, and the epoch/kind in the title."""

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from heatmap_viewer.matrices import MatrixSet, load_matrix, find_exports, parse_name

_CMAPS = {"flow": "viridis", "cost": "magma"}


def build_figure(ms: MatrixSet, vmin=None, vmax=None):
    """Figure for one matrix. vmin/vmax override the per-matrix color
    normalization (used for a scale shared across epochs)."""
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * ms.num_teachers,
                                    1.2 + 0.6 * ms.num_students))
    image = ax.imshow(
        ms.values, cmap=_CMAPS[ms.kind], vmin=vmin, vmax=vmax,
        origin="upper", aspect="equal", interpolation="nearest",
    )
    ax.set_xticks(range(ms.num_teachers),
                  [str(i + 1) for i in range(ms.num_teachers)])
    ax.set_yticks(range(ms.num_students),
                  [str(j + 1) for j in range(ms.num_students)])
    ax.set_xlabel("teacher layer")
    ax.set_ylabel("student layer")
    ax.set_title(f"{ms.target} {ms.kind} matrix, epoch {ms.epoch}")
    fig.colorbar(image, ax=ax, label=ms.kind)
    fig.tight_layout()
    return fig


def render(csv_path, output_image_path, vmin=None, vmax=None) -> Path:
    """Render one CSV to an image file; returns the output path."""
    ms = load_matrix(csv_path)
    fig = build_figure(ms, vmin=vmin, vmax=vmax)
    output_image_path = Path(output_image_path)
    output_image_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output_image_path)
    plt.close(fig)
    return output_image_path


def render_run(run_dir, out_dir, shared_scale: bool = False) -> list[Path]:
    """Render every matrix export in a run directory.

    With shared_scale, all epochs of the same (target, kind) pair share
    one color range so colors are comparable across epochs; the default
    normalizes each matrix independently for maximum contrast.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = find_exports(run_dir)

    ranges = {}
    if shared_scale:
        groups = defaultdict(list)
        for p in paths:
            epoch, target, kind = parse_name(p)
            groups[(target, kind)].append(load_matrix(p).values)
        ranges = {
            key: (min(v.min() for v in vals), max(v.max() for v in vals))
            for key, vals in groups.items()
        }

    outputs = []
    for p in paths:
        epoch, target, kind = parse_name(p)
        vmin, vmax = ranges.get((target, kind), (None, None))
        outputs.append(render(p, out_dir / (p.stem + ".png"), vmin, vmax))
    return outputs
