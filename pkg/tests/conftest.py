import math

import numpy as np
import pytest


def pytest_configure():
    pytest.EcgOracle = EcgOracle
    pytest.attention_reference = attention_reference
    pytest.confusion_counts = confusion_counts
    pytest.polyline_pixel_count = polyline_pixel_count


class EcgOracle:
    """Peak-detection measurements of one lead, independent of the generator."""

    def __init__(self, lead: np.ndarray, sample_rate_hz: float, refractory_s: float = 0.2):
        self.x = lead - np.median(lead)
        self.fs = sample_rate_hz
        self.radius = int(refractory_s * sample_rate_hz)

    def r_peaks(self) -> np.ndarray:
        x, radius = self.x, self.radius
        threshold = 0.5 * x.max()
        peaks = []
        for i in np.flatnonzero(x > threshold):
            window = x[max(0, i - radius): i + radius + 1]
            if x[i] == window.max() and (not peaks or i - peaks[-1] > radius):
                peaks.append(int(i))
        return np.array(peaks)

    def rr_intervals(self) -> np.ndarray:
        return np.diff(self.r_peaks()) / self.fs

    def rate_bpm(self) -> float:
        return 60.0 / float(self.rr_intervals().mean())

    def rr_cv(self) -> float:
        rr = self.rr_intervals()
        return float(rr.std() / rr.mean())

    def qrs_width_s(self) -> float:
        """Median full width at half maximum of the R waves."""
        widths = []
        for peak in self.r_peaks():
            half = self.x[peak] / 2
            left = peak
            while left > 0 and self.x[left] > half:
                left -= 1
            right = peak
            while right < len(self.x) - 1 and self.x[right] > half:
                right += 1
            widths.append((right - left) / self.fs)
        return float(np.median(widths))


def _loop_matmul(a, b) -> list[list[float]]:
    return [[sum(a[i, c] * b[c, j] for c in range(a.shape[1])) for j in range(b.shape[1])] for i in range(len(a))]


def attention_reference(z_q, z_v, w_q, w_k, w_v) -> np.ndarray:
    """Attention `softmax(Q·Kᵀ)·V` evaluated with explicit loops, Q and K from `z_q`, V from `z_v`."""
    z_q, z_v = np.asarray(z_q), np.asarray(z_v)
    q, k, v = _loop_matmul(z_q, w_q), _loop_matmul(z_q, w_k), _loop_matmul(z_v, w_v)
    out = []
    for i in range(len(q)):
        scores = [sum(a * b for a, b in zip(q[i], k[j])) for j in range(len(k))]
        top = max(scores)
        exps = [math.exp(score - top) for score in scores]
        total = sum(exps)
        weights = [value / total for value in exps]
        out.append([sum(weights[j] * v[j][d] for j in range(len(v))) for d in range(len(v[0]))])
    return np.array(out)


def confusion_counts(predictions, labels, threshold: float):
    """Per-class TP, FP, FN, TN lists counted one sample at a time."""
    n_classes = len(labels[0])
    counts = {key: [0] * n_classes for key in ('tp', 'fp', 'fn', 'tn')}
    for p_row, t_row in zip(predictions, labels):
        for c in range(n_classes):
            predicted, actual = p_row[c] >= threshold, bool(t_row[c])
            key = ('tp' if actual else 'fp') if predicted else ('fn' if actual else 'tn')
            counts[key][c] += 1
    return counts


def polyline_pixel_count(ys) -> int:
    """Pixels of a 1 px wide polyline through `(x, ys[x])` vertices, one vertex per column."""
    ys = [int(y) for y in ys]
    return 1 + sum(max(1, abs(b - a)) for a, b in zip(ys, ys[1:]))
