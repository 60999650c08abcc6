"""Sliding-window stitched inference and pooled full-image evaluation."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .architectures import Network
from .data import FundusImage, preprocess_array
from .engine import bten
from .errors import ParameterError, UsageError
from .metrics import DEFAULT_THRESHOLD, MetricsReport, evaluate_scores, format_report, report_header, save_curves, \
    write_report_csv

Predictor = Union[Network, Callable[[np.ndarray], np.ndarray]]


def window_starts(extent: int, patch: int, stride: int) -> list[int]:
    """Regular grid of offsets plus a final flush-right offset when the grid falls short."""
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def _predict(net: Predictor, batch: np.ndarray, batch_size: int) -> np.ndarray:
    if isinstance(net, Network):
        return net.predict(batch, batch_size=batch_size)
    return np.asarray(net(batch))


def stitch_predict(
    net: Predictor,
    image: Union[FundusImage, np.ndarray],
    patch_size: int = 48,
    stride: Optional[int] = None,
    batch_size: int = 16,
    return_coverage: bool = False,
    visit_order: Optional[np.random.Generator] = None,
):
    """Full-size probability map from overlapping patch predictions.

    ``image`` is a FundusImage (preprocessed here) or an already preprocessed
    2-D array. Each pixel gets the mean of every window covering it. Windows
    are predicted in ``visit_order`` (a permutation drawn from the given
    generator, default sequential) but summed in a fixed order, so the result
    does not depend on the visiting order.
    """
    arr = preprocess_array(image) if isinstance(image, FundusImage) else np.asarray(image, dtype=np.float32)
    H, W = arr.shape
    P = patch_size
    stride = P // 2 if stride is None else stride
    if P > H or P > W:
        raise ParameterError(f"image {H}x{W} is smaller than the {P}x{P} patch")
    if not 1 <= stride <= P:
        raise ParameterError(f"stride must be in [1, {P}], got {stride}")
    coords = [(t, l) for t in window_starts(H, P, stride) for l in window_starts(W, P, stride)]
    order = np.arange(len(coords)) if visit_order is None else visit_order.permutation(len(coords))
    preds = np.empty((len(coords), P, P), dtype=np.float64)
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        batch = np.stack([arr[coords[i][0] : coords[i][0] + P, coords[i][1] : coords[i][1] + P] for i in idx])
        preds[idx] = _predict(net, batch[:, None].astype(np.float32), batch_size)[:, 0]
    total = np.zeros((H, W))
    cover = np.zeros((H, W), dtype=np.int64)
    for (t, l), p in zip(coords, preds):
        total[t : t + P, l : l + P] += p
        cover[t : t + P, l : l + P] += 1
    probs = np.clip(total / cover, 0.0, 1.0)
    return (probs, cover) if return_coverage else probs


def score_maps(
    maps: Sequence[np.ndarray],
    images: Sequence[FundusImage],
    threshold: float = DEFAULT_THRESHOLD,
    use_fov: bool = True,
) -> MetricsReport:
    """Pool every image's (FOV-masked) pixels and score them as one set."""
    if not images:
        raise UsageError("no images to evaluate")
    scores, truth = [], []
    for m, img in zip(maps, images):
        keep = img.fov.astype(bool) if use_fov else np.ones(img.shape, bool)
        scores.append(np.asarray(m, dtype=np.float64)[keep])
        truth.append(img.mask[keep])
    return evaluate_scores(np.concatenate(scores), np.concatenate(truth), threshold)


def evaluate(
    net: Predictor,
    images: Sequence[FundusImage],
    out_dir=None,
    patch_size: int = 48,
    stride: Optional[int] = None,
    threshold: float = DEFAULT_THRESHOLD,
    use_fov: bool = True,
    method: str = "model",
) -> tuple[MetricsReport, dict[str, np.ndarray]]:
    """Stitch, score and (when ``out_dir`` is given) write artifacts.

    Artifacts: ``report.csv``, ``report.txt`` (fixed-width row), ``roc.csv``,
    ``pr.csv`` and ``probs/<id>.bten`` (float32 probability maps).
    """
    if not images:
        raise UsageError("no images to evaluate")
    # scored at the stored precision so saved maps reproduce the report exactly
    maps = {img.id: stitch_predict(net, img, patch_size, stride).astype(np.float32) for img in images}
    report = score_maps([maps[img.id] for img in images], images, threshold, use_fov)
    if out_dir is not None:
        write_artifacts(Path(out_dir), report, maps, method)
    return report, maps


def write_artifacts(out: Path, report: MetricsReport, maps: dict[str, np.ndarray], method: str) -> None:
    (out / "probs").mkdir(parents=True, exist_ok=True)
    for key, m in maps.items():
        bten.save(out / "probs" / f"{key}.bten", m.astype(np.float32))
    write_report_csv(out / "report.csv", [(method, report)])
    (out / "report.txt").write_text(report_header() + "\n" + format_report(report, method) + "\n")
    save_curves(report, out)


def load_maps(directory, ids: Sequence[str]) -> list[np.ndarray]:
    d = Path(directory) / "probs"
    return [bten.load(d / f"{i}.bten", expect_dtype=np.float32) for i in ids]
