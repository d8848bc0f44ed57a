"""
Report figures. Figures are built on bare Agg canvases rather than pyplot,
so patients plotting from worker threads never share global state. PNG
metadata is stripped so repeated runs write identical bytes.
"""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

_SAVE_KW = {"dpi": 80, "metadata": {"Software": None}}
_VERT_COLOURS = colormaps["tab10"].colors[:7]


def _figure(figsize, nrows=1, ncols=1):
    fig = Figure(figsize=figsize)
    FigureCanvasAgg(fig)
    return fig, fig.subplots(nrows, ncols)


def _save(fig, path):
    fig.savefig(path, **_SAVE_KW)


def plot_projection(img, path, boxes=(), title=None):
    """Grey-scale projection with optional ``(Box2D, colour)`` overlays."""
    fig, ax = _figure((4, 4))
    ax.imshow(img.pixels if hasattr(img, "pixels") else img, cmap="gray", interpolation="nearest")
    for box, colour in boxes:
        ax.add_patch(Rectangle((box.x0 - 0.5, box.y0 - 0.5), box.x1 - box.x0, box.y1 - box.y0,
                               fill=False, edgecolor=colour, linewidth=1.2))
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    _save(fig, path)


def plot_multilabel(mask, path, title=None):
    """Overlay of the seven channels, one colour per vertebra."""
    h, w = mask.dims
    rgb = np.zeros((h, w, 3))
    for v in range(7):
        ch = mask.channels[v].astype(bool)
        rgb[ch] = np.maximum(rgb[ch], _VERT_COLOURS[v])
    fig, ax = _figure((4, 4))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_title(title or mask.axis, fontsize=9)
    ax.set_axis_off()
    _save(fig, path)


def plot_stack_montage(stacks, path):
    """Middle plane of each of the 15 stacks."""
    fig, axes = _figure((7.5, 4.8), 3, 5)
    for i, ax in enumerate(axes.ravel()):
        ax.imshow(stacks.planes[i, stacks.planes.shape[1] // 2], cmap="gray", vmin=0, vmax=1)
        ax.set_title(str(i), fontsize=7)
        ax.set_axis_off()
    fig.suptitle(f"C{stacks.vertebra} {stacks.variant} stacks", fontsize=9)
    _save(fig, path)


def plot_metrics(values: dict, path, title="metrics"):
    names = sorted(values)
    fig, ax = _figure((5, 0.35 * len(names) + 1))
    ax.barh(names, [values[n] for n in names], color="0.4")
    ax.set_xlim(0, max(1.0, max(values.values(), default=1.0)))
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)
