"""Dataset-level sampling weights for multi-dataset training.

Three schemes over per-dataset token totals ``N_i = n_i * tau_i``:
uniform, temperature-scaled proportional ``w_i ~ exp(p_i / T)`` and
``w_i ~ sqrt(N_i)``. The reference corpus below is the eight-dataset table
used for the foundation-model experiments; it doubles as a test fixture.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

SCHEMES = ("uniform", "temperature", "sqrt")


class SamplingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetStats:
    name: str
    n_trajectories: int
    height: int
    width: int
    dwt_levels: int = 1

    @property
    def tokens_per_example(self) -> int:
        f = 2**self.dwt_levels
        return (self.height // f) * (self.width // f)

    @property
    def total_tokens(self) -> int:
        return self.n_trajectories * self.tokens_per_example


@dataclass(frozen=True)
class CorpusStats:
    datasets: tuple[DatasetStats, ...]

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.datasets]

    @property
    def total_tokens(self) -> np.ndarray:
        return np.array([d.total_tokens for d in self.datasets], dtype=np.float64)

    def __len__(self):
        return len(self.datasets)


REFERENCE_CORPUS = CorpusStats(
    (
        DatasetStats("active_matter", 14_000, 256, 256),
        DatasetStats("gray_scott_reaction_diffusion", 960_000, 128, 128),
        DatasetStats("rayleigh_benard", 278_600, 512, 128),
        DatasetStats("shear_flow", 178_304, 256, 512),
        DatasetStats("turbulent_radiative_layer_2D", 7_200, 128, 384),
        DatasetStats("viscoelastic_instability", 6_487, 512, 512),
        DatasetStats("acoustic_scattering_maze", 321_600, 256, 256),
        DatasetStats("helmholtz_staircase", 20_384, 1024, 256),
    )
)


@dataclass(frozen=True)
class SamplingWeights:
    scheme: str
    w: np.ndarray
    temperature: float | None = None


def proportional_share(stats: CorpusStats) -> np.ndarray:
    N = stats.total_tokens
    if len(N) == 0 or N.sum() <= 0:
        raise SamplingConfigError("corpus has no tokens")
    return N / N.sum()


def weights(scheme: str, stats: CorpusStats, temperature: float | None = None) -> SamplingWeights:
    if scheme == "uniform":
        w = np.full(len(stats), 1.0 / len(stats))
    elif scheme == "temperature":
        if temperature is None:
            raise SamplingConfigError("temperature scheme needs a temperature T")
        if not temperature > 0:
            raise SamplingConfigError(f"temperature must be positive, got {temperature}")
        z = proportional_share(stats) / temperature
        e = np.exp(z - z.max())
        w = e / e.sum()
    elif scheme == "sqrt":
        s = np.sqrt(stats.total_tokens)
        w = s / s.sum()
    else:
        raise SamplingConfigError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    return SamplingWeights(scheme, w, temperature if scheme == "temperature" else None)


def kl_to_proportional(w: np.ndarray, p: np.ndarray) -> float:
    """D_KL(w || p) in nats; zero-weight entries contribute nothing."""
    w, p = np.asarray(w, float), np.asarray(p, float)
    m = w > 0
    return float(np.sum(w[m] * np.log(w[m] / p[m])))


def oversampling_ratio(w: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.asarray(w, float) / np.asarray(p, float)


def next_dataset(w: np.ndarray, rng: np.random.Generator) -> int:
    """Categorical draw by inverse CDF; entries with zero weight are never picked."""
    c = np.cumsum(w)
    i = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(w) - 1)
    # round-off at the top end can land past the last positive weight
    while w[i] == 0 and i > 0:
        i -= 1
    return i


class DatasetSampler:
    """Seeded sequence of dataset indices drawn from fixed weights."""

    def __init__(self, w: np.ndarray, seed: int = 0):
        self.w = np.asarray(w, float)
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> int:
        return next_dataset(self.w, self.rng)


# ---------------------------------------------------------------------------
# corpus file and report


CORPUS_COLUMNS = ("name", "n_trajectories", "height", "width", "dwt_levels")


def parse_corpus(text: str) -> CorpusStats:
    """Read a CSV corpus description (header optional, dwt_levels optional)."""
    rows = []
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
            continue
        if lineno == 1 and rec[0].strip() == "name":
            continue
        if len(rec) not in (4, 5):
            raise SamplingConfigError(f"line {lineno}: expected 4 or 5 fields, got {len(rec)}")
        try:
            nums = [int(v) for v in rec[1:]]
        except ValueError:
            raise SamplingConfigError(f"line {lineno}: non-integer field in {rec}") from None
        if min(nums) <= 0:
            raise SamplingConfigError(f"line {lineno}: counts must be positive")
        rows.append(DatasetStats(rec[0].strip(), *nums))
    if not rows:
        raise SamplingConfigError("corpus file has no datasets")
    return CorpusStats(tuple(rows))


def corpus_to_csv(stats: CorpusStats) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CORPUS_COLUMNS)
    for d in stats.datasets:
        wr.writerow([d.name, d.n_trajectories, d.height, d.width, d.dwt_levels])
    return buf.getvalue()


def sampling_report(stats: CorpusStats, temperature: float = 0.2) -> list[dict]:
    """Rows of (dataset, tokens, p, w per scheme, ratio per scheme) plus a KL row."""
    p = proportional_share(stats)
    ws = {
        "uniform": weights("uniform", stats).w,
        "temperature": weights("temperature", stats, temperature).w,
        "sqrt": weights("sqrt", stats).w,
    }
    rows = []
    for i, d in enumerate(stats.datasets):
        row = {"dataset": d.name, "n_i": d.n_trajectories, "tau_i": d.tokens_per_example, "N_i": d.total_tokens}
        row["p_prop"] = p[i]
        for k, w in ws.items():
            row[f"w_{k}"] = w[i]
        for k, w in ws.items():
            row[f"ratio_{k}"] = w[i] / p[i]
        rows.append(row)
    kl = {"dataset": "KL(w||p) [nats]", "n_i": "", "tau_i": "", "N_i": "", "p_prop": 0.0}
    for k, w in ws.items():
        kl[f"w_{k}"] = kl_to_proportional(w, p)
        kl[f"ratio_{k}"] = ""
    rows.append(kl)
    return rows
