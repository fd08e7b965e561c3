"""
Objective evaluation suite
Fréchet distance, kernel distance, density/coverage, cosine scores, the batched
evaluation protocol, adherence-metric plugins and the MetricReport writers.
"""
import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from sklearn.metrics import pairwise_distances

from .exceptions import ContractViolation, DegenerateInputError, PartialReportError, RegistrationError
from .models import EmbeddingSet

logger = logging.getLogger(__name__)

EIGENVALUE_TOLERANCE = 1e-10
BASE_METRICS = ["kd", "fad", "coverage", "density", "cs_aa", "cs_ta"]
DISPLAY_NAMES = {
    "kd": "KD", "fad": "FAD", "coverage": "Cov.", "density": "Den.", "cs_aa": "CS_AA", "cs_ta": "CS_TA",
}

AdherenceFn = Callable[[EmbeddingSet, EmbeddingSet], float]


def _check_pair(x: EmbeddingSet, y: EmbeddingSet) -> None:
    if x.dim != y.dim:
        raise ContractViolation(f"embedding dimensions differ: {x.dim} vs {y.dim}")


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_distance(x: EmbeddingSet, y: EmbeddingSet, x_name: str = "X", y_name: str = "Y") -> float:
    """
    ||mu_x - mu_y||^2 + Tr(S_x + S_y - 2 (S_x S_y)^(1/2))

    The trace of the matrix square root is computed from the eigenvalues of the
    symmetric matrix S_x^(1/2) S_y S_x^(1/2); eigenvalues below 1e-10 of the
    largest are treated as 0.
    """
    _check_pair(x, y)
    for embeddings, name in ((x, x_name), (y, y_name)):
        if len(embeddings) < embeddings.dim + 1:
            raise DegenerateInputError(
                f"set {name} has {len(embeddings)} rows; a {embeddings.dim}-d covariance needs {embeddings.dim + 1}",
                set_name=name,
            )
    mu_x, mu_y = x.vectors.mean(axis=0), y.vectors.mean(axis=0)
    cov_x = np.atleast_2d(np.cov(x.vectors, rowvar=False))
    cov_y = np.atleast_2d(np.cov(y.vectors, rowvar=False))
    for cov, name in ((cov_x, x_name), (cov_y, y_name)):
        if not np.isfinite(cov).all():
            raise DegenerateInputError(f"covariance of set {name} is not finite", set_name=name)

    root_x = _sqrt_psd(cov_x)
    middle = root_x @ cov_y @ root_x
    middle = 0.5 * (middle + middle.T)
    eigenvalues = linalg.eigh(middle, eigvals_only=True)
    largest = max(float(eigenvalues.max()), 0.0)
    eigenvalues = np.where(eigenvalues < EIGENVALUE_TOLERANCE * largest, 0.0, eigenvalues)
    tr_covmean = float(np.sqrt(np.clip(eigenvalues, 0.0, None)).sum())

    diff = mu_x - mu_y
    value = float(diff.dot(diff) + np.trace(cov_x) + np.trace(cov_y) - 2.0 * tr_covmean)
    return max(value, 0.0)


def polynomial_kernel(a: np.ndarray, b: np.ndarray, degree: int = 3) -> np.ndarray:
    """k(x, y) = (x^T y / D + 1)^degree for all row pairs"""
    return (a @ b.T / a.shape[1] + 1.0) ** degree


def kernel_distance(x: EmbeddingSet, y: EmbeddingSet, degree: int = 3) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (diagonals excluded)"""
    _check_pair(x, y)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ContractViolation(f"kernel distance needs at least 2 rows per set, got {m} and {n}")
    k_xx = polynomial_kernel(x.vectors, x.vectors, degree)
    k_yy = polynomial_kernel(y.vectors, y.vectors, degree)
    k_xy = polynomial_kernel(x.vectors, y.vectors, degree)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * k_xy.mean())


def density_coverage(real: EmbeddingSet, gen: EmbeddingSet, k: int = 5) -> Tuple[float, float]:
    """
    Density and coverage of gen against the k-NN balls of real

    Balls are closed (distance <= radius). Radii exclude the point itself.
    """
    _check_pair(real, gen)
    if k < 1 or len(real) <= k:
        raise ContractViolation(f"density/coverage need more than k={k} real rows, got {len(real)}")
    if len(gen) == 0:
        raise ContractViolation("density/coverage need at least one generated row")
    real_sq = pairwise_distances(real.vectors, real.vectors, metric='sqeuclidean')
    radii_sq = np.partition(real_sq, k, axis=1)[:, k]
    cross_sq = pairwise_distances(real.vectors, gen.vectors, metric='sqeuclidean')
    inside = cross_sq <= radii_sq[:, None]           # (real, gen)
    density = float(inside.sum()) / (k * len(gen))
    coverage = float(inside.any(axis=1).sum()) / len(real)
    return density, coverage


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0 or norm_b == 0:
        raise ContractViolation("cosine score of a zero vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def mean_cosine_score(generated: np.ndarray, truth: np.ndarray) -> float:
    """Mean cosine over row-aligned pairs (CS_AA / CS_TA)"""
    if generated.shape != truth.shape:
        raise ContractViolation(f"paired sets differ in shape: {generated.shape} vs {truth.shape}")
    return float(np.mean([cosine_score(a, b) for a, b in zip(generated, truth)]))


# Adherence plugins
_ADHERENCE_METRICS: Dict[str, AdherenceFn] = {}


def register_adherence_metric(name: str, fn: Optional[AdherenceFn] = None):
    """
    Register fn(context_set, accompaniment_set) -> float under name

    Usable directly or as a decorator (@register_adherence_metric("apa")).
    """
    def _register(metric: AdherenceFn) -> AdherenceFn:
        if name in _ADHERENCE_METRICS or name in BASE_METRICS:
            raise RegistrationError(f"metric {name!r} is already registered")
        _ADHERENCE_METRICS[name] = metric
        logger.info(f"Registered adherence metric {name}")
        return metric

    if fn is None:
        return _register
    return _register(fn)


def unregister_adherence_metric(name: str) -> None:
    if name not in _ADHERENCE_METRICS:
        raise RegistrationError(f"metric {name!r} is not registered")
    del _ADHERENCE_METRICS[name]


def registered_adherence_metrics() -> List[str]:
    return list(_ADHERENCE_METRICS)


@dataclass
class CandidateBatch:
    """One batch of generated audio-side embeddings plus what they are scored against"""
    audio: EmbeddingSet
    truth_audio: Optional[np.ndarray] = None   # row-aligned reference audio (CS_AA)
    truth_text: Optional[np.ndarray] = None    # row-aligned text prompts (CS_TA)
    context: Optional[EmbeddingSet] = None     # context embeddings for adherence plugins


@dataclass
class MetricCell:
    """Mean and sample std of each metric over the evaluated batches"""
    variant: str
    conditioning: str
    means: Dict[str, Optional[float]] = field(default_factory=dict)
    stds: Dict[str, Optional[float]] = field(default_factory=dict)
    batches: int = 0
    status: str = "ok"


def evaluate_batch(batch: CandidateBatch, reference: EmbeddingSet, k: int,
                   plugins: Dict[str, AdherenceFn]) -> Dict[str, Optional[float]]:
    """Every metric for one candidate batch against the full reference"""
    density, coverage = density_coverage(reference, batch.audio, k)
    values: Dict[str, Optional[float]] = {
        "kd": kernel_distance(batch.audio, reference),
        "fad": frechet_distance(batch.audio, reference, "generated", "reference"),
        "coverage": coverage,
        "density": density,
        "cs_aa": None if batch.truth_audio is None else mean_cosine_score(batch.audio.vectors, batch.truth_audio),
        "cs_ta": None if batch.truth_text is None else mean_cosine_score(batch.audio.vectors, batch.truth_text),
    }
    for name, fn in plugins.items():
        values[name] = None if batch.context is None else float(fn(batch.context, batch.audio))
    return values


def _summarize(values: List[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    std = float(np.std(present, ddof=1)) if len(present) > 1 else 0.0
    return float(np.mean(present)), std


def evaluation_protocol(
    candidates: Iterable[CandidateBatch],
    reference: EmbeddingSet,
    batches: int = 5,
    batch_size: int = 1000,
    k: int = 5,
    variant: str = "",
    conditioning: str = "",
    n_jobs: int = 1,
) -> MetricCell:
    """
    Average each metric over `batches` candidate batches scored against one reference

    Batches are drawn sequentially (the candidate source may be stateful) and then
    scored in parallel threads.

    Args:
        candidates: Iterable yielding CandidateBatch objects of batch_size rows
        reference: Real audio-side reference set
        batches: Number of batches to average
        batch_size: Rows expected per batch
        k: Nearest-neighbour count for density/coverage
        variant: Row label for the report
        conditioning: Column-group label for the report
        n_jobs: joblib thread count for scoring

    Returns:
        MetricCell with means and sample standard deviations
    """
    iterator: Iterator[CandidateBatch] = iter(candidates)
    drawn: List[CandidateBatch] = []
    for _ in range(batches):
        try:
            batch = next(iterator)
        except StopIteration:
            batch = None
        if batch is None or len(batch.audio) < batch_size:
            raise PartialReportError(
                f"candidate source exhausted after {len(drawn)} of {batches} batches",
                completed_batches=list(range(len(drawn))),
            )
        if len(batch.audio) > batch_size:
            raise ContractViolation(f"candidate batch has {len(batch.audio)} rows, expected {batch_size}")
        drawn.append(batch)

    plugins = dict(_ADHERENCE_METRICS)
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(evaluate_batch)(batch, reference, k, plugins) for batch in drawn
    )
    cell = MetricCell(variant=variant, conditioning=conditioning, batches=len(results))
    for name in BASE_METRICS + list(plugins):
        cell.means[name], cell.stds[name] = _summarize([r.get(name) for r in results])
    return cell


@dataclass
class MetricReport:
    """Ablation-grid output"""
    cells: List[MetricCell] = field(default_factory=list)
    header: Dict[str, str] = field(default_factory=dict)
    metrics: List[str] = field(default_factory=lambda: list(BASE_METRICS))

    def add(self, cell: MetricCell) -> None:
        for name in cell.means:
            if name not in self.metrics:
                self.metrics.append(name)
        self.cells.append(cell)

    def cell(self, variant: str, conditioning: str) -> Optional[MetricCell]:
        for cell in self.cells:
            if cell.variant == variant and cell.conditioning == conditioning:
                return cell
        return None

    def to_csv(self) -> str:
        """One row per cell; header lines start with '#'"""
        buffer = io.StringIO()
        for key in sorted(self.header):
            buffer.write(f"# {key}: {self.header[key]}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        columns = ["variant", "conditioning", "status", "batches"]
        for name in self.metrics:
            columns += [f"{name}_mean", f"{name}_std"]
        writer.writerow(columns)
        for cell in self.cells:
            row = [cell.variant, cell.conditioning, cell.status, str(cell.batches)]
            for name in self.metrics:
                row += [_format(cell.means.get(name)), _format(cell.stds.get(name))]
            writer.writerow(row)
        return buffer.getvalue()

    def to_table(self) -> str:
        """Aligned text table: rows grouped by variant, one column per metric (means)"""
        headers = ["Variant", "Inputs"] + [DISPLAY_NAMES.get(m, m) for m in self.metrics]
        rows: List[List[str]] = []
        previous = None
        for cell in self.cells:
            label = cell.variant if cell.variant != previous else ""
            previous = cell.variant
            if cell.status != "ok":
                rows.append([label, cell.conditioning] + [cell.status] + [""] * (len(self.metrics) - 1))
                continue
            rows.append([label, cell.conditioning] + [_format(cell.means.get(m), 3) for m in self.metrics])
        widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
        return "\n".join(lines) + "\n"


def _format(value: Optional[float], digits: int = 6) -> str:
    return "" if value is None else f"{value:.{digits}f}"
