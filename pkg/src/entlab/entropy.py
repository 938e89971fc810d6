"""Shannon-entropy statistics of attention matrices and their diagnostics.

Per-head entropy is the query-averaged row entropy -1/T sum_i sum_j
a_ij log(max(a_ij, eps)) in nats, with eps = 1e-9 flooring the log argument
and masked (exactly-zero) entries contributing exactly 0. Entries at or
above eps see the exact logarithm, so uniform and one-hot closed forms hold
to float precision. Aggregations, bucket classification, collapse/overload
detection, and CSV/SVG export live here. All functions are pure; file
writes are atomic.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .autodiff import Tensor
from .util import atomic_write_text

EPS = 1e-9

# slack for float accumulation artifacts when checking the [0, log T] range
_BOUND_SLACK = 1e-8


def head_entropy(probs, eps=EPS):
    """Mean over query rows of -sum_j p*log(max(p, eps)) for one head.

    probs: [T,T] or [B,T,T] array (or Tensor); batched input averages the
    per-element entropies. Rows must be distributions over their unmasked
    support: non-negative, summing to 1.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if p.ndim != 3 or p.shape[-1] != p.shape[-2]:
        raise ValueError(f"head_entropy expects [T,T] or [B,T,T], got {p.shape}")
    if np.any(p < 0.0):
        raise ValueError("negative attention probabilities")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("attention rows must sum to 1 over unmasked entries")
    rows = K.entropy_rows_fwd(np.ascontiguousarray(p), eps)
    return float(np.mean(rows))


@dataclass
class EntropyMatrix:
    """L x H grid of per-head mean attention entropies for one snapshot."""

    values: np.ndarray
    T: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"entropy grid must be 2-D (L x H), got {self.values.shape}")

    @property
    def e_max_theoretical(self):
        return math.log(self.T)

    @property
    def e_max_observed(self):
        return float(self.values.max())

    def validate(self):
        lo, hi = self.values.min(), self.values.max()
        if lo < -_BOUND_SLACK:
            raise ValueError(f"entropy below 0 beyond slack: {lo}")
        if hi > self.e_max_theoretical + _BOUND_SLACK:
            raise ValueError(f"entropy above log T beyond slack: {hi} > {self.e_max_theoretical}")
        return self


def model_entropy(trace, eps=EPS):
    """Apply head_entropy to every (layer, head) of a ForwardTrace."""
    if not trace.attention:
        raise ValueError("trace carries no attention matrices (empty or uncaptured)")
    L = len(trace.attention)
    H = len(trace.attention[0])
    vals = np.empty((L, H))
    T = None
    for l in range(L):
        for h in range(H):
            p = trace.attention[l][h]
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            T = arr.shape[-1]
            vals[l, h] = head_entropy(arr, eps)
    return EntropyMatrix(vals, T)


@dataclass
class BucketSummary:
    """Head fractions in [0, m/4), [m/4, 3m/4), [3m/4, m] against observed max."""

    fractions: tuple
    reference_max: float


def bucket_fractions(em):
    values = em.values
    m = em.e_max_observed
    n = values.size
    if m <= 0.0:
        # degenerate all-zero grid: everything sits in the bottom bucket
        return BucketSummary((1.0, 0.0, 0.0), m)
    lo = float(np.count_nonzero(values < 0.25 * m)) / n
    mid = float(np.count_nonzero((values >= 0.25 * m) & (values < 0.75 * m))) / n
    hi = float(np.count_nonzero(values >= 0.75 * m)) / n
    return BucketSummary((lo, mid, hi), m)


def detect_collapse(em, fraction_threshold=0.05):
    """Heads with entropy < fraction_threshold * log T (near-deterministic
    attention, the deeper-layer instability signature). Returns a sorted
    list of (layer, head, entropy)."""
    cut = fraction_threshold * em.e_max_theoretical
    L, H = em.values.shape
    return [
        (l, h, float(em.values[l, h]))
        for l in range(L)
        for h in range(H)
        if em.values[l, h] < cut
    ]


def collapse_counts_per_layer(em, fraction_threshold=0.05):
    counts = [0] * em.values.shape[0]
    for l, _h, _v in detect_collapse(em, fraction_threshold):
        counts[l] += 1
    return counts


def detect_overload(em, fraction_threshold=0.75):
    """Heads with entropy > fraction_threshold * observed max (crowding the
    top of the entropy range, the early-layer under-utilization signature)."""
    cut = fraction_threshold * em.e_max_observed
    L, H = em.values.shape
    return [
        (l, h, float(em.values[l, h]))
        for l in range(L)
        for h in range(H)
        if em.values[l, h] > cut
    ]


# --------------------------------------------------------------------- export

# 5-stop viridis approximation, positions 0, .25, .5, .75, 1
_VIRIDIS = [
    (0.267, 0.005, 0.329),
    (0.229, 0.322, 0.545),
    (0.128, 0.567, 0.551),
    (0.369, 0.789, 0.383),
    (0.993, 0.906, 0.144),
]


def _viridis(x):
    x = min(max(float(x), 0.0), 1.0)
    pos = x * 4.0
    i = min(int(pos), 3)
    f = pos - i
    r, g, b = (
        _VIRIDIS[i][c] + f * (_VIRIDIS[i + 1][c] - _VIRIDIS[i][c]) for c in range(3)
    )
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def entropy_csv(em):
    lines = ["layer,head,entropy"]
    L, H = em.values.shape
    for l in range(L):
        for h in range(H):
            lines.append(f"{l},{h},{em.values[l, h]:.8e}")
    return "\n".join(lines) + "\n"


def read_entropy_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != "layer,head,entropy":
            raise ValueError(f"unexpected entropy CSV header: {header!r}")
        cells = {}
        for line in f:
            line = line.strip()
            if not line:
                continue
            l, h, v = line.split(",")
            cells[(int(l), int(h))] = float(v)
    if not cells:
        raise ValueError("entropy CSV has no data rows")
    L = max(l for l, _ in cells) + 1
    H = max(h for _, h in cells) + 1
    vals = np.zeros((L, H))
    for (l, h), v in cells.items():
        vals[l, h] = v
    return vals


def entropy_svg(em, cell=28, pad=46, legend_w=18):
    """L x H heatmap; color scale fixed to [0, log T] so snapshots compare."""
    L, H = em.values.shape
    vmax = em.e_max_theoretical
    W = pad + H * cell + 30 + legend_w + 58
    Hgt = pad + L * cell + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hgt}" '
        f'viewBox="0 0 {W} {Hgt}" font-family="sans-serif" font-size="10">',
        f'<rect width="{W}" height="{Hgt}" fill="white"/>',
        f'<text x="{pad}" y="14">attention entropy (nats), scale 0..log T = {vmax:.4f}</text>',
    ]
    for l in range(L):
        for h in range(H):
            v = em.values[l, h]
            color = _viridis(v / vmax if vmax > 0 else 0.0)
            x = pad + h * cell
            y = pad + l * cell
            parts.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell - 1}" height="{cell - 1}" '
                f'fill="{color}"><title>layer {l} head {h}: {v:.6f}</title></rect>'
            )
    for h in range(H):
        parts.append(f'<text x="{pad + h * cell + 4}" y="{pad - 6}">{h}</text>')
    for l in range(L):
        parts.append(f'<text x="{pad - 18}" y="{pad + l * cell + 17}">{l}</text>')
    # legend: vertical ramp, max at top
    lx = pad + H * cell + 30
    steps = 24
    ly0 = pad
    lh = L * cell
    for s in range(steps):
        frac = 1.0 - s / steps
        parts.append(
            f'<rect x="{lx}" y="{ly0 + s * lh / steps:.1f}" width="{legend_w}" '
            f'height="{lh / steps + 0.5:.1f}" fill="{_viridis(frac)}"/>'
        )
    parts.append(f'<text x="{lx + legend_w + 4}" y="{ly0 + 10}">max {vmax:.4f}</text>')
    parts.append(f'<text x="{lx + legend_w + 4}" y="{ly0 + lh}">min 0</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_heatmap(em, path, fmt="svg"):
    if fmt == "csv":
        atomic_write_text(path, entropy_csv(em))
    elif fmt == "svg":
        atomic_write_text(path, entropy_svg(em))
    else:
        raise ValueError(f"unknown heatmap format {fmt!r} (want csv or svg)")
    return path
