"""
doawave — Plotting Service
Static polar spatial-spectrum plots and time-frequency mask figures.
"""

import logging
from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

mpl.rcParams.update({
    "svg.hashsalt": "doawave",
    "font.size": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "savefig.bbox": "tight",
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    # no timestamps, so reruns write identical files
    metadata = {"Date": None} if fmt == "svg" else {"Software": None}
    fig.savefig(path, format=fmt, dpi=150, metadata=metadata)
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def plot_spatial_spectrum(spectrum, path, truth=None, estimate=None, posterior=None,
                          half_circle: bool = False, title: str | None = None) -> Path:
    """Polar plot of a spatial spectrum normalized to its maximum.

    truth / estimate are angles in radians; `posterior` (N, K) is overlaid per
    source when given. `half_circle` limits the display to 0..180 degrees.
    """
    classes = spectrum.grid.classes
    scores = np.asarray(spectrum.scores, dtype=np.float64)
    top = scores.max()
    shape = scores / top if top > 0 else scores

    fig = plt.figure(figsize=(4.0, 4.0))
    ax = fig.add_subplot(projection="polar")
    closed = np.append(classes, classes[0])
    ax.plot(closed, np.append(shape, shape[0]), color="tab:blue", lw=1.2, label=spectrum.method.value)

    if posterior is not None:
        for n, probs in enumerate(np.asarray(posterior)):
            ax.fill_between(classes, 0, probs / max(probs.max(), 1e-12), alpha=0.25,
                            label=f"posterior {n}")
    for i, t in enumerate(np.atleast_1d(truth) if truth is not None else []):
        ax.plot([t, t], [0, 1.05], color="tab:red", ls="--", lw=1, label="truth" if i == 0 else None)
    for i, e in enumerate(np.atleast_1d(estimate) if estimate is not None else []):
        ax.plot([e], [1.0], "o", color="tab:green", ms=5, label="estimate" if i == 0 else None)

    ax.set_ylim(0, 1.1)
    ax.set_yticklabels([])
    if half_circle:
        ax.set_thetamin(0)
        ax.set_thetamax(180)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left", bbox_to_anchor=(-0.15, -0.15), frameon=False)
    return _save(fig, path)


def plot_masks(path, reference_magnitude: np.ndarray, masks: dict, source: int = 0,
               sample_rate: int = 16000, hop: int = 128) -> Path:
    """Reference magnitude next to each named mask of one source, shape (T, F) each."""
    panels = [("reference (dB)", 20.0 * np.log10(np.maximum(reference_magnitude, 1e-8)))]
    panels += [(name, m.values[source]) for name, m in masks.items()]

    n_frames, n_bins = reference_magnitude.shape
    extent = [0.0, n_frames * hop / sample_rate, 0.0, sample_rate / 2000.0]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 2.6), sharey=True)
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        is_mask = not name.startswith("reference")
        im = ax.imshow(img.T, origin="lower", aspect="auto", extent=extent, cmap="magma",
                       vmin=0.0 if is_mask else None, vmax=1.0 if is_mask else None)
        ax.set_title(name)
        ax.set_xlabel("time (s)")
        fig.colorbar(im, ax=ax, fraction=0.046)
    np.atleast_1d(axes)[0].set_ylabel("frequency (kHz)")
    return _save(fig, path)
