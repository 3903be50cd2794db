"""Report figures rendered to files with matplotlib.

Everything draws on the Agg backend so the pipeline works headless; each
function writes one PNG and returns its path. These complement the
delimited metric tables: the CSVs stay the machine-readable record, the
figures are for eyes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def map_grid(path, maps, dims, row_labels, col_labels, vrange=None,
             cmap="viridis"):
    """Grid of images: one row per label, one column per component.

    maps has shape (n_rows, n_cols, V); a shared linear color scale spans
    `vrange` (defaults to the global min/max of the data).
    """
    maps = np.asarray(maps, dtype=np.float64)
    n_rows, n_cols = maps.shape[:2]
    if len(row_labels) != n_rows or len(col_labels) != n_cols:
        raise ValueError("label counts must match the map grid")
    if vrange is None:
        vrange = (float(maps.min()), float(maps.max()))
    fig, axes = plt.subplots(n_rows, n_cols, squeeze=False,
                             figsize=(2.6 * n_cols + 1.2, 2.2 * n_rows))
    for i in range(n_rows):
        for j in range(n_cols):
            ax = axes[i][j]
            im = ax.imshow(maps[i, j].reshape(dims), vmin=vrange[0],
                           vmax=vrange[1], cmap=cmap, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(col_labels[j], fontsize=10)
            if j == 0:
                ax.set_ylabel(row_labels[i], fontsize=10)
    fig.colorbar(im, ax=[ax for row in axes for ax in row], shrink=0.85)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def metric_boxplots(path, values_by_method, ylabel, title=""):
    """Side-by-side boxplots per component, one box per method.

    values_by_method maps a method name to an (S, L) array; each box
    summarizes the S per-subject values of one (method, component) cell.
    """
    methods = list(values_by_method)
    n_comp = np.asarray(values_by_method[methods[0]]).shape[1]
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.8 * n_comp + 2.5, 3.4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, name in enumerate(methods):
        vals = np.asarray(values_by_method[name], dtype=np.float64)
        pos = np.arange(n_comp) + (k - (len(methods) - 1) / 2.0) * width
        bp = ax.boxplot([vals[:, l] for l in range(n_comp)], positions=pos,
                        widths=width * 0.85, patch_artist=True,
                        medianprops={"color": "black"})
        for box in bp["boxes"]:
            box.set_facecolor(colors[k % len(colors)])
    ax.set_xticks(np.arange(n_comp))
    ax.set_xticklabels([f"component {l + 1}" for l in range(n_comp)])
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, facecolor=colors[k % len(colors)])
               for k in range(len(methods))]
    ax.legend(handles, methods, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def rate_bars(path, rates_by_method, ylabel, hline=None):
    """Grouped bars of a per-component rate, averaged over subjects."""
    methods = list(rates_by_method)
    n_comp = np.asarray(rates_by_method[methods[0]]).shape[1]
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.8 * n_comp + 2.5, 3.4))
    for k, name in enumerate(methods):
        vals = np.asarray(rates_by_method[name], dtype=np.float64)
        pos = np.arange(n_comp) + (k - (len(methods) - 1) / 2.0) * width
        ax.bar(pos, vals.mean(axis=0), width * 0.9, label=name)
    if hline is not None:
        ax.axhline(hline, color="gray", linestyle=":", linewidth=1)
    ax.set_xticks(np.arange(n_comp))
    ax.set_xticklabels([f"component {l + 1}" for l in range(n_comp)])
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def fc_error_bars(path, fc_mse_by_method):
    """Connectivity squared error per component pair, one bar per method."""
    methods = list(fc_mse_by_method)
    n_comp = np.asarray(fc_mse_by_method[methods[0]]).shape[0]
    pairs = [(a, b) for a in range(n_comp) for b in range(a + 1, n_comp)]
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.5 * len(pairs) + 2.5, 3.4))
    for k, name in enumerate(methods):
        mat = np.asarray(fc_mse_by_method[name], dtype=np.float64)
        vals = [mat[a, b] for a, b in pairs]
        pos = np.arange(len(pairs)) + (k - (len(methods) - 1) / 2.0) * width
        ax.bar(pos, vals, width * 0.9, label=name)
    ax.set_xticks(np.arange(len(pairs)))
    ax.set_xticklabels([f"{a + 1}-{b + 1}" for a, b in pairs])
    ax.set_xlabel("component pair")
    ax.set_ylabel("connectivity MSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def trace_plot(path, traces, ylabel="parameter step"):
    """Per-subject optimization traces on a log scale.

    traces maps a label to a 1-D array of per-iteration step sizes.
    """
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for label, t in traces.items():
        t = np.asarray(t, dtype=np.float64)
        ax.semilogy(np.arange(1, t.size + 1), t, marker=".", label=label)
    ax.set_xlabel("map evaluation")
    ax.set_ylabel(ylabel)
    if len(traces) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
