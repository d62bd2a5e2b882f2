"""Comparison matchers used as attack targets."""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Tuple

import fsspec
import numpy as np
import pandas as pd

from til.codec import MinutiaeTemplate, angle_distance
from til.config import MatcherSpec
from til.exceptions import ConfigurationError, ContractError, IngestionError
from til.networks import Embedding, EmbedderNet, embed, load_embedder, read_manifest
from til.synthdata import extract_minutiae_classical

if TYPE_CHECKING:
    from til.evaluation import PairList

logger = logging.getLogger(__name__)

SCALES = ("similarity_0_1", "cosine_m1_1", "external")

# Candidate alignments kept per rotation for exact pairing
_REFINED_CANDIDATES = 8
_CANDIDATE_CHUNK = 256


@dataclass(frozen=True)
class MatchScore:
    """A comparison score tagged with its native scale."""

    value: float
    scale: str = "similarity_0_1"

    def __post_init__(self) -> None:
        if self.scale not in SCALES:
            raise ContractError(f"Unknown score scale: {self.scale}")
        value = float(self.value)
        if self.scale == "similarity_0_1" and not 0.0 <= value <= 1.0:
            raise ContractError(f"Similarity score {value} outside [0, 1]")
        if self.scale == "cosine_m1_1" and not -1.0 <= value <= 1.0:
            raise ContractError(f"Cosine score {value} outside [-1, 1]")
        object.__setattr__(self, "value", value)

    def __float__(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# Minutiae matcher
# ---------------------------------------------------------------------------


def _greedy_pairs(
    a_xy: np.ndarray, b_xy: np.ndarray, angle_ok: np.ndarray, distance_tol: float
) -> int:
    """One-to-one pairing, closest admissible pairs first; returns the pair count."""
    dist = np.linalg.norm(a_xy[:, None, :] - b_xy[None, :, :], axis=2)
    admissible = (dist <= distance_tol) & angle_ok
    ii, jj = np.nonzero(admissible)
    if ii.size == 0:
        return 0
    order = np.lexsort((jj, ii, dist[ii, jj]))
    used_a, used_b = set(), set()
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
    return len(used_a)


def _one_way_score(
    a: np.ndarray,
    b: np.ndarray,
    distance_tol: float,
    angle_tol: float,
    rotations: np.ndarray,
) -> float:
    """Best paired / max(|a|, |b|) over rotations and pair-implied translations of ``a``."""
    best = 0
    candidates: List[Tuple[int, int, np.ndarray, np.ndarray]] = []
    for r_idx, rot in enumerate(rotations):
        c, s = math.cos(rot), math.sin(rot)
        a_xy = a[:, :2] @ np.array([[c, s], [-s, c]])
        angle_ok = angle_distance(a[:, 2][:, None] + rot, b[:, 2][None, :]) <= angle_tol
        ii, jj = np.nonzero(angle_ok)
        if ii.size == 0:
            continue
        translations = b[jj, :2] - a_xy[ii]
        quick = np.empty(len(translations), dtype=np.int64)
        for start in range(0, len(translations), _CANDIDATE_CHUNK):
            t = translations[start : start + _CANDIDATE_CHUNK]
            moved = a_xy[None, :, :] + t[:, None, :]
            dist = np.linalg.norm(moved[:, :, None, :] - b[None, None, :, :2], axis=3)
            hits = (dist <= distance_tol) & angle_ok[None]
            quick[start : start + len(t)] = hits.any(axis=2).sum(axis=1)
        top = np.argsort(-quick, kind="stable")[:_REFINED_CANDIDATES]
        for k in top:
            candidates.append((-int(quick[k]), r_idx, a_xy + translations[k], angle_ok))

    candidates.sort(key=lambda c: (c[0], c[1]))
    # quick counts bound the exact pair count from above
    for neg_quick, _, moved, angle_ok in candidates:
        if -neg_quick <= best:
            break
        best = max(best, _greedy_pairs(moved, b[:, :2], angle_ok, distance_tol))
    return best / max(len(a), len(b))


def minutiae_match(
    a: MinutiaeTemplate,
    b: MinutiaeTemplate,
    distance_tol: float = 12.0,
    angle_tol: float = 0.35,
    rotation_range_deg: float = 30.0,
    rotation_step_deg: float = 5.0,
) -> MatchScore:
    """
    Alignment-searching minutiae comparison.

    For every rotation on the grid ±``rotation_range_deg`` (step
    ``rotation_step_deg``), each angle-compatible minutiae pair implies a
    translation; the eight best-supported candidates per rotation are refined
    by greedy one-to-one pairing within (``distance_tol``, ``angle_tol``).
    The one-way score is paired / max(|a|, |b|); the result averages both
    directions, so it is exactly symmetric. An empty template scores 0. The
    search is bounded, so on dense templates the score may fall below the
    exhaustive optimum.
    """
    if len(a) == 0 or len(b) == 0:
        return MatchScore(0.0, "similarity_0_1")
    n_steps = int(math.floor(rotation_range_deg / rotation_step_deg + 1e-9))
    rotations = np.radians(np.arange(-n_steps, n_steps + 1) * rotation_step_deg)
    arr_a, arr_b = a.as_array(), b.as_array()
    forward = _one_way_score(arr_a, arr_b, distance_tol, angle_tol, rotations)
    backward = _one_way_score(arr_b, arr_a, distance_tol, angle_tol, rotations)
    return MatchScore((forward + backward) / 2.0, "similarity_0_1")


# ---------------------------------------------------------------------------
# Embedding matcher
# ---------------------------------------------------------------------------


def embedding_match(r1: Embedding, r2: Embedding) -> MatchScore:
    """
    Cosine similarity of two unit-norm embeddings.

    Raises:
        ContractError: If either embedding is not normalized
    """
    if not (r1.normalized and r2.normalized):
        raise ContractError("Embedding matcher requires normalized embeddings")
    value = float(np.clip(np.dot(r1.values, r2.values), -1.0, 1.0))
    return MatchScore(value, "cosine_m1_1")


# ---------------------------------------------------------------------------
# External scores
# ---------------------------------------------------------------------------


def read_score_file(path: str) -> Dict[Tuple[str, str], float]:
    """
    Load a (probe_id, gallery_id, score) CSV through fsspec.

    Raises:
        IngestionError: On a missing file, missing columns or conflicting duplicate rows
    """
    try:
        with fsspec.open(path, "r") as f:
            frame = pd.read_csv(f, dtype={"probe_id": str, "gallery_id": str})
    except FileNotFoundError as e:
        raise IngestionError(f"Score file not found: {path}") from e
    missing_columns = {"probe_id", "gallery_id", "score"} - set(frame.columns)
    if missing_columns:
        raise IngestionError(f"Score file {path} lacks columns {sorted(missing_columns)}")

    conflicts = (
        frame.groupby(["probe_id", "gallery_id"])["score"].nunique().loc[lambda s: s > 1]
    )
    if len(conflicts):
        raise IngestionError(
            f"Conflicting duplicate scores in {path}",
            pair_ids=[pair_id(p, g) for p, g in conflicts.index],
        )
    deduped = frame.drop_duplicates(["probe_id", "gallery_id"])
    return {
        (row.probe_id, row.gallery_id): float(row.score) for row in deduped.itertuples(index=False)
    }


def pair_id(probe_id: str, gallery_id: str) -> str:
    return f"{probe_id}|{gallery_id}"


def external_scores(
    spec: MatcherSpec, pairs: "PairList | Iterable[Tuple[str, str]]"
) -> List[MatchScore]:
    """
    Scores for ``pairs`` ingested verbatim from ``spec.score_file``.

    Raises:
        IngestionError: Listing every pair the file does not cover
    """
    if not spec.score_file:
        raise ConfigurationError(f"Matcher '{spec.name}' has no score_file")
    table = read_score_file(spec.score_file)
    wanted = list(pairs.all_pairs() if hasattr(pairs, "all_pairs") else pairs)
    gaps = [pair_id(p, g) for p, g in wanted if (p, g) not in table]
    if gaps:
        raise IngestionError(f"Score file {spec.score_file} is missing pairs", pair_ids=gaps)
    return [MatchScore(table[(p, g)], "external") for p, g in wanted]


# ---------------------------------------------------------------------------
# Matcher objects used by the evaluation harness
# ---------------------------------------------------------------------------


class Matcher:
    """Base class for attack-target matchers."""

    scale = "similarity_0_1"

    def __init__(self, spec: MatcherSpec):
        self.spec = spec
        self.name = spec.name
        self.system = spec.system

    def features(self, img: np.ndarray) -> Any:
        """Matcher-native features of an image."""
        raise NotImplementedError

    def compare(self, probe: Any, gallery: Any) -> MatchScore:
        """Score two feature sets."""
        raise NotImplementedError

    def score_pairs(
        self, pairs: List[Tuple[str, str]], features: Dict[str, Any]
    ) -> List[MatchScore]:
        """Score id pairs against a feature lookup."""
        return [self.compare(features[p], features[g]) for p, g in pairs]


class MinutiaeMatcher(Matcher):
    """Crossing-number extraction plus :func:`minutiae_match`."""

    def features(self, img: np.ndarray) -> MinutiaeTemplate:
        return extract_minutiae_classical(img)

    def compare(self, probe: MinutiaeTemplate, gallery: MinutiaeTemplate) -> MatchScore:
        return minutiae_match(
            probe,
            gallery,
            distance_tol=self.spec.distance_tol,
            angle_tol=self.spec.angle_tol,
            rotation_range_deg=self.spec.rotation_range_deg,
            rotation_step_deg=self.spec.rotation_step_deg,
        )


class EmbeddingMatcher(Matcher):
    """Embedder instance plus cosine comparison."""

    scale = "cosine_m1_1"

    def __init__(self, spec: MatcherSpec, embedder: EmbedderNet):
        super().__init__(spec)
        self.embedder = embedder

    def features(self, img: np.ndarray) -> Embedding:
        return embed(self.embedder, img)

    def compare(self, probe: Embedding, gallery: Embedding) -> MatchScore:
        return embedding_match(probe, gallery)


class ExternalMatcher(Matcher):
    """Scores computed outside the lab, read from a CSV file."""

    scale = "external"

    def __init__(self, spec: MatcherSpec):
        super().__init__(spec)
        self._table: Optional[Dict[Tuple[str, str], float]] = None

    def features(self, img: np.ndarray) -> None:
        return None

    def score_pairs(
        self, pairs: List[Tuple[str, str]], features: Optional[Dict[str, Any]] = None
    ) -> List[MatchScore]:
        return external_scores(self.spec, pairs)


def create_matcher(spec: MatcherSpec, device: str = "cpu") -> Matcher:
    """
    Factory function to create the matcher a spec describes.

    Raises:
        ConfigurationError: If an embedding checkpoint holds a different instance
        DependencyError: If the embedder checkpoint is missing
    """
    if spec.kind == "minutiae":
        return MinutiaeMatcher(spec)
    if spec.kind == "embedding":
        manifest = read_manifest(spec.embedder_checkpoint)
        if manifest.get("instance") != spec.instance:
            raise ConfigurationError(
                f"Matcher '{spec.name}' expects embedder-{spec.instance}, "
                f"checkpoint holds embedder-{manifest.get('instance')}"
            )
        return EmbeddingMatcher(spec, load_embedder(spec.embedder_checkpoint, device))
    if spec.kind == "external":
        return ExternalMatcher(spec)
    raise ConfigurationError(f"Unknown matcher kind: {spec.kind}")
