"""Verification protocols, TAR@FAR and the type-I/type-II attack matrix."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import xarray as xr  # noqa: E402
from sklearn.metrics import roc_auc_score  # noqa: E402
from tqdm import tqdm  # noqa: E402

from til.codec import rasterize  # noqa: E402
from til.config import AttackSpec, MapConfig, MatcherSpec, TemplateSourceSpec  # noqa: E402
from til.exceptions import ConfigurationError, ContractError, DependencyError, ProtocolError  # noqa: E402
from til.matchers import ExternalMatcher, Matcher, create_matcher  # noqa: E402
from til.networks import (  # noqa: E402
    GeneratorE,
    GeneratorM,
    embed,
    extract_minutiae_learned,
    generate,
    load_embedder,
    load_generator,
    load_map_estimator,
    read_manifest,
)
from til.synthdata import Dataset, Impression, binarize  # noqa: E402
from til.utils import atomic_write_text, ensure_local_dir, to_uint8  # noqa: E402

logger = logging.getLogger(__name__)

STYLES = ("sd4_style", "fvc_style")
ATTACK_TYPES = ("type1", "type2")

Pair = Tuple[str, str]


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


@dataclass
class PairList:
    """Genuine and impostor (probe_id, gallery_id) pairs of one protocol."""

    genuine: List[Pair]
    impostor: List[Pair]
    style: str

    def all_pairs(self) -> List[Pair]:
        return self.genuine + self.impostor

    def probe_ids(self) -> List[str]:
        """Distinct genuine probes in first-seen order."""
        return list(dict.fromkeys(p for p, _ in self.genuine))

    def ids(self) -> set:
        return {i for pair in self.all_pairs() for i in pair}


def build_pairs(dataset: Dataset, style: str) -> PairList:
    """
    Build the verification protocol of a dataset.

    sd4_style needs exactly two impressions per finger: one genuine pair per
    finger with the second impression as probe. fvc_style takes every
    impression pair of a finger (later impression as probe). Both styles pair
    the first impression of each finger with the first impression of every
    later finger as impostors.

    Raises:
        ProtocolError: On an unknown style, fewer than two fingers, uneven
            impression counts or a style/shape mismatch
    """
    if style not in STYLES:
        raise ProtocolError(f"Unknown protocol style: {style}")
    fingers = dataset.fingers
    if len(fingers) < 2:
        raise ProtocolError(f"Protocols need at least two fingers, got {len(fingers)}")
    counts = {len(f.impressions) for f in fingers}
    if len(counts) != 1:
        raise ProtocolError(f"Fingers have uneven impression counts: {sorted(counts)}")
    k = counts.pop()
    if style == "sd4_style" and k != 2:
        raise ProtocolError(f"sd4_style needs 2 impressions per finger, dataset has {k}")
    if k < 2:
        raise ProtocolError("Protocols need at least two impressions per finger")

    genuine: List[Pair] = []
    for finger in fingers:
        ids = [imp.impression_id for imp in finger.impressions]
        for a in range(k):
            for b in range(a + 1, k):
                genuine.append((ids[b], ids[a]))

    firsts = [f.impressions[0].impression_id for f in fingers]
    impostor = [(firsts[i], firsts[j]) for i in range(len(firsts)) for j in range(i + 1, len(firsts))]
    logger.debug(f"{style}: {len(genuine)} genuine, {len(impostor)} impostor pairs")
    return PairList(genuine=genuine, impostor=impostor, style=style)


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    """Decision threshold at a FAR; ``saturated`` when no impostor score can serve."""

    value: float
    far: float
    saturated: bool = False


def threshold_at_far(impostor_scores: Sequence[float], far: float) -> Threshold:
    """
    Smallest impostor score t with (#impostor ≥ t) / N ≤ far.

    Scores at or above the threshold are accepted. When even the maximum
    impostor score admits too many false accepts, the threshold is placed just
    above the maximum and flagged saturated.

    Raises:
        ContractError: On empty scores or far outside (0, 1)
    """
    scores = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if scores.size == 0:
        raise ContractError("threshold_at_far needs at least one impostor score")
    if not 0.0 < far < 1.0:
        raise ContractError(f"far must lie in (0, 1), got {far}")
    n = scores.size
    limit = far * n * (1.0 + 1e-12)
    unique = np.unique(scores)
    at_or_above = n - np.searchsorted(scores, unique, side="left")
    ok = np.nonzero(at_or_above <= limit)[0]
    if ok.size == 0:
        return Threshold(float(np.nextafter(scores[-1], np.inf)), far, saturated=True)
    return Threshold(float(unique[ok[0]]), far, saturated=False)


def tar_at_far(genuine: Sequence[float], impostor: Sequence[float], far: float) -> float:
    """Fraction of genuine scores at or above :func:`threshold_at_far`."""
    return tar_with_threshold(genuine, impostor, far)[0]


def tar_with_threshold(
    genuine: Sequence[float], impostor: Sequence[float], far: float
) -> Tuple[float, Threshold]:
    gen = np.asarray(genuine, dtype=np.float64)
    if gen.size == 0:
        raise ContractError("tar_at_far needs at least one genuine score")
    threshold = threshold_at_far(impostor, far)
    return float(np.mean(gen >= threshold.value)), threshold


def separability_auc(genuine: Sequence[float], impostor: Sequence[float]) -> float:
    """ROC AUC of genuine against impostor scores."""
    labels = np.concatenate([np.ones(len(genuine)), np.zeros(len(impostor))])
    return float(roc_auc_score(labels, np.concatenate([genuine, impostor])))


# ---------------------------------------------------------------------------
# Template sources
# ---------------------------------------------------------------------------


class TemplateSource:
    """Base class for template sources: extract a template and reconstruct from it."""

    def __init__(self, spec: TemplateSourceSpec):
        self.spec = spec
        self.name = spec.name
        self.system = spec.system
        self.resolution: Optional[int] = None

    def reconstruct(self, imp: Impression) -> np.ndarray:
        """Reconstruction of an impression from its template."""
        raise NotImplementedError

    def trained_on(self) -> set:
        """Finger ids seen while training any network this source uses."""
        return set()


class GroundTruthSource(TemplateSource):
    """Identity inversion: the source image stands in for its reconstruction."""

    def reconstruct(self, imp: Impression) -> np.ndarray:
        return imp.image


class _InverterSource(TemplateSource):
    def __init__(self, spec: TemplateSourceSpec, device: str = "cpu"):
        super().__init__(spec)
        self.generator = load_generator(spec.inverter_checkpoint, device)
        self.resolution = self.generator.profile.resolution
        self._checkpoints = [spec.inverter_checkpoint]

    def trained_on(self) -> set:
        ids = set()
        for checkpoint in self._checkpoints:
            ids.update(read_manifest(checkpoint).get("train_fingers", []))
        return ids


class MinutiaeInverterSource(_InverterSource):
    """Minutiae template (stored or read off the map estimator) through G_m."""

    def __init__(self, spec: TemplateSourceSpec, map_config: MapConfig, device: str = "cpu"):
        super().__init__(spec, device)
        if not isinstance(self.generator, GeneratorM):
            raise ConfigurationError(
                f"Source '{spec.name}' needs a minutiae inverter, {spec.inverter_checkpoint} is not one"
            )
        self.map_config = map_config
        self.map_estimator = None
        if spec.kind == "estimator":
            self.map_estimator = load_map_estimator(spec.map_estimator_checkpoint, device)
            self._checkpoints.append(spec.map_estimator_checkpoint)

    def template(self, imp: Impression):
        if self.map_estimator is not None:
            return extract_minutiae_learned(
                self.map_estimator, imp.image, self.spec.peak_threshold, self.map_config
            )
        return imp.template

    def reconstruct(self, imp: Impression) -> np.ndarray:
        return generate(self.generator, rasterize(self.template(imp), self.map_config))


class DeepInverterSource(_InverterSource):
    """Embedder-A embedding through G_e."""

    def __init__(self, spec: TemplateSourceSpec, device: str = "cpu"):
        super().__init__(spec, device)
        if not isinstance(self.generator, GeneratorE):
            raise ConfigurationError(
                f"Source '{spec.name}' needs a deep inverter, {spec.inverter_checkpoint} is not one"
            )
        self.embedder = load_embedder(spec.embedder_checkpoint, device)
        self._checkpoints.append(spec.embedder_checkpoint)

    def reconstruct(self, imp: Impression) -> np.ndarray:
        return generate(self.generator, embed(self.embedder, imp.image))


def create_template_source(
    spec: TemplateSourceSpec, map_config: Optional[MapConfig] = None, device: str = "cpu"
) -> TemplateSource:
    """Factory function to create the template source a spec describes."""
    if spec.kind == "ground_truth":
        return GroundTruthSource(spec)
    if spec.kind in ("classical", "estimator"):
        if map_config is None:
            raise ConfigurationError(f"Source '{spec.name}' needs a map configuration")
        return MinutiaeInverterSource(spec, map_config, device)
    if spec.kind == "deep":
        return DeepInverterSource(spec, device)
    raise ConfigurationError(f"Unknown template source kind: {spec.kind}")


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------


def _parallel_map(
    fn: Callable[[Any], Any], items: Sequence[Any], workers: int, desc: str
) -> List[Any]:
    """Apply ``fn`` to every item in a thread pool, preserving input order."""
    results: Dict[int, Any] = {}
    failed = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}
        with tqdm(total=len(items), desc=desc, disable=len(items) < 2) as pbar:
            for future in as_completed(future_to_index):
                i = future_to_index[future]
                try:
                    results[i] = future.result()
                except Exception as e:
                    failed.append((items[i], str(e)))
                pbar.update(1)
    if failed:
        error_summary = "\n".join(f"  - {item}: {err}" for item, err in failed[:20])
        raise RuntimeError(f"{desc} failed for {len(failed)}/{len(items)} items:\n{error_summary}")
    return [results[i] for i in range(len(items))]


def reconstruction_id(impression_id: str, source_name: str) -> str:
    """Probe id of the reconstruction of an impression by a source."""
    return f"{impression_id}@{source_name}"


@dataclass
class AttackResult:
    """Outcome of one (template source, matcher) attack."""

    source: str
    matcher: str
    white_box: bool
    far: float
    scores: Dict[str, List[Tuple[str, str, float]]]
    tar: Dict[str, float] = field(default_factory=dict)
    thresholds: Dict[str, Threshold] = field(default_factory=dict)
    failures: Dict[str, List[Tuple[str, str, float]]] = field(default_factory=dict)

    @property
    def tar_type1(self) -> float:
        return self.tar.get("type1", math.nan)

    @property
    def tar_type2(self) -> float:
        return self.tar.get("type2", math.nan)

    def rescore(self, far: float, attack_types: Iterable[str] = ATTACK_TYPES) -> "AttackResult":
        """Recompute TARs, thresholds and failures at a new FAR from the stored scores."""
        impostor = [s for _, _, s in self.scores["impostor"]]
        threshold = threshold_at_far(impostor, far)
        if threshold.saturated:
            logger.warning(
                f"{self.source} x {self.matcher}: threshold saturated at FAR {far} "
                f"({len(impostor)} impostor scores)"
            )
        tar, thresholds, failures = {}, {}, {}
        for attack in attack_types:
            genuine = self.scores.get(f"genuine_{attack}", [])
            if not genuine:
                continue
            values = np.array([s for _, _, s in genuine])
            tar[attack] = float(np.mean(values >= threshold.value))
            thresholds[attack] = threshold
            failures[attack] = [row for row in genuine if row[2] < threshold.value]
        return AttackResult(
            self.source, self.matcher, self.white_box, far, self.scores, tar, thresholds, failures
        )


class ScoreCache:
    """Reconstructions per source and features per matcher shared across matrix cells."""

    def __init__(self):
        self.reconstructions: Dict[str, Dict[str, np.ndarray]] = {}
        self.features: Dict[str, Dict[str, Any]] = {}
        self.impostor: Dict[str, List[Tuple[str, str, float]]] = {}


def _check_disjoint(source: TemplateSource, pairs: PairList, dataset: Dataset) -> None:
    trained = source.trained_on()
    if not trained:
        return
    eval_fingers = {dataset.finger_of(i) for i in pairs.ids()}
    overlap = sorted(trained & eval_fingers)
    if overlap:
        raise ProtocolError(
            f"Source '{source.name}' was trained on {len(overlap)} evaluation fingers "
            f"(e.g. {', '.join(overlap[:5])})"
        )


def run_attack(
    spec: AttackSpec,
    dataset: Dataset,
    pairs: PairList,
    *,
    source: Optional[TemplateSource] = None,
    matcher: Optional[Matcher] = None,
    map_config: Optional[MapConfig] = None,
    device: str = "cpu",
    workers: int = 4,
    cache: Optional[ScoreCache] = None,
) -> AttackResult:
    """
    Run one template-inversion attack.

    Every genuine probe impression is reconstructed from its template; the
    reconstruction is scored against its own source impression (type-I) and
    against the gallery impression of the same finger (type-II). The
    impostor distribution comes from source-vs-source impostor pairs.

    Raises:
        ProtocolError: If the source saw evaluation fingers in training or
            the dataset resolution does not match the inverter
    """
    source = source or create_template_source(spec.source, map_config, device)
    matcher = matcher or create_matcher(spec.matcher, device)
    cache = cache or ScoreCache()
    _check_disjoint(source, pairs, dataset)

    lookup = {imp.impression_id: imp for imp in dataset.impressions()}
    missing = sorted(pairs.ids() - set(lookup))
    if missing:
        raise ProtocolError(f"Pairs reference impressions missing from the dataset: {', '.join(missing[:5])}")
    probes = pairs.probe_ids()
    if source.resolution is not None:
        shape = lookup[probes[0]].image.shape
        if shape != (source.resolution, source.resolution):
            raise ProtocolError(
                f"Dataset images are {shape[1]}x{shape[0]}, source '{source.name}' "
                f"reconstructs {source.resolution}x{source.resolution}"
            )

    recon = cache.reconstructions.setdefault(source.name, {})
    todo = [p for p in probes if p not in recon]
    images_out = _parallel_map(
        lambda p: source.reconstruct(lookup[p]), todo, workers, f"Reconstructing ({source.name})"
    )
    recon.update(zip(todo, images_out))

    feats = cache.features.setdefault(matcher.name, {})
    wanted = {i for pair in pairs.all_pairs() for i in pair}
    images: Dict[str, np.ndarray] = {i: lookup[i].image for i in wanted}
    for probe in probes:
        images[reconstruction_id(probe, source.name)] = recon[probe]
    todo_ids = sorted(i for i in images if i not in feats)
    if not isinstance(matcher, ExternalMatcher):
        computed = _parallel_map(
            lambda i: matcher.features(images[i]), todo_ids, workers, f"Features ({matcher.name})"
        )
        feats.update(zip(todo_ids, computed))

    def score(pair_list: List[Pair]) -> List[Tuple[str, str, float]]:
        values = matcher.score_pairs(pair_list, feats)
        return [(p, g, float(s)) for (p, g), s in zip(pair_list, values)]

    if matcher.name not in cache.impostor:
        cache.impostor[matcher.name] = score(pairs.impostor)
    scores: Dict[str, List[Tuple[str, str, float]]] = {"impostor": cache.impostor[matcher.name]}
    if "type1" in spec.attack_types:
        scores["genuine_type1"] = score(
            list(dict.fromkeys((reconstruction_id(p, source.name), p) for p, _ in pairs.genuine))
        )
    if "type2" in spec.attack_types:
        scores["genuine_type2"] = score(
            [(reconstruction_id(p, source.name), g) for p, g in pairs.genuine]
        )

    result = AttackResult(
        source=source.name,
        matcher=matcher.name,
        white_box=source.system == matcher.system,
        far=spec.far,
        scores=scores,
    ).rescore(spec.far, spec.attack_types)
    logger.info(
        f"{source.name} x {matcher.name}: TAR type-I {result.tar_type1:.4f}, "
        f"type-II {result.tar_type2:.4f} at FAR {spec.far}"
    )
    return result


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class AttackReport:
    """Grid of attack results over template sources and matchers."""

    grid: xr.Dataset
    results: Dict[Tuple[str, str], AttackResult]
    far: float

    @classmethod
    def from_results(
        cls, results: Dict[Tuple[str, str], AttackResult], sources: List[str], matchers: List[str], far: float
    ) -> "AttackReport":
        shape = (len(sources), len(matchers))
        variables = {
            name: np.full(shape, np.nan)
            for name in ("tar_type1", "tar_type2", "threshold", "n_genuine", "n_impostor")
        }
        saturated = np.zeros(shape, dtype=bool)
        white_box = np.zeros(shape, dtype=bool)
        for i, s in enumerate(sources):
            for j, m in enumerate(matchers):
                r = results[(s, m)]
                variables["tar_type1"][i, j] = r.tar_type1
                variables["tar_type2"][i, j] = r.tar_type2
                threshold = next(iter(r.thresholds.values()), None)
                if threshold is not None:
                    variables["threshold"][i, j] = threshold.value
                    saturated[i, j] = threshold.saturated
                variables["n_genuine"][i, j] = len(r.scores.get("genuine_type1", r.scores.get("genuine_type2", [])))
                variables["n_impostor"][i, j] = len(r.scores["impostor"])
                white_box[i, j] = r.white_box
        data_vars = {name: (("source", "matcher"), values) for name, values in variables.items()}
        data_vars["saturated"] = (("source", "matcher"), saturated)
        data_vars["white_box"] = (("source", "matcher"), white_box)
        grid = xr.Dataset(
            data_vars, coords={"source": sources, "matcher": matchers}, attrs={"far": far}
        )
        return cls(grid=grid, results=results, far=far)

    @property
    def n_cells(self) -> int:
        return int(self.grid.sizes["source"] * self.grid.sizes["matcher"])

    def at_far(self, far: float) -> "AttackReport":
        """The same report re-thresholded at a new FAR."""
        results = {key: r.rescore(far, _present_types(r.scores)) for key, r in self.results.items()}
        return AttackReport.from_results(
            results, list(self.grid.source.values), list(self.grid.matcher.values), far
        )

    def to_frame(self) -> pd.DataFrame:
        return self.grid.to_dataframe().reset_index()

    def to_markdown(self) -> str:
        """Render cells as "type-I (type-II)" TAR percentages; white-box cells carry a *."""
        matchers = [str(m) for m in self.grid.matcher.values]
        lines = [
            f"TAR (%) @ FAR of {self.far * 100:g}% for type-I (type-II) attacks",
            "",
            "| Template source | " + " | ".join(matchers) + " |",
            "|---" * (len(matchers) + 1) + "|",
        ]
        for s in self.grid.source.values:
            cells = []
            for m in self.grid.matcher.values:
                cell = self.grid.sel(source=s, matcher=m)
                text = f"{_percent(float(cell.tar_type1))} ({_percent(float(cell.tar_type2))})"
                if bool(cell.white_box):
                    text += " *"
                if bool(cell.saturated):
                    text += " †"
                cells.append(text)
            lines.append(f"| {s} | " + " | ".join(cells) + " |")
        lines += ["", "\\* white-box attack; † threshold saturated (no impostor score reaches the FAR)"]
        return "\n".join(lines) + "\n"

    def distributions_frame(self) -> pd.DataFrame:
        rows = []
        for (s, m), r in self.results.items():
            for kind, triples in r.scores.items():
                rows.extend((s, m, kind, p, g, score) for p, g, score in triples)
        return pd.DataFrame(rows, columns=["source", "matcher", "kind", "probe_id", "gallery_id", "score"])

    def failures_frame(self) -> pd.DataFrame:
        rows = []
        for (s, m), r in self.results.items():
            for attack, triples in r.failures.items():
                threshold = r.thresholds[attack].value
                rows.extend((s, m, attack, p, g, score, threshold) for p, g, score in triples)
        return pd.DataFrame(
            rows, columns=["source", "matcher", "attack_type", "probe_id", "gallery_id", "score", "threshold"]
        )

    def write(self, out_dir: Path, histograms: bool = True) -> List[Path]:
        """Write report.csv, report.md, distributions.csv, failures.csv and histograms."""
        out_dir = Path(out_dir)
        ensure_local_dir(out_dir)
        written = []
        paths = {
            "report.csv": self.to_frame().to_csv(index=False, float_format="%.6f"),
            "report.md": self.to_markdown(),
            "distributions.csv": self.distributions_frame().to_csv(index=False, float_format="%.9g"),
            "failures.csv": self.failures_frame().to_csv(index=False, float_format="%.9g"),
            "report.json": json.dumps({"far": self.far, "cells": self.n_cells}, indent=2) + "\n",
        }
        for name, text in paths.items():
            atomic_write_text(out_dir / name, text)
            written.append(out_dir / name)
        if histograms:
            for (s, m), r in self.results.items():
                written.append(plot_score_histogram(r, out_dir / f"hist_{_slug(s)}__{_slug(m)}.png"))
        return written


def _present_types(scores: Dict[str, Any]) -> List[str]:
    return [a for a in ATTACK_TYPES if f"genuine_{a}" in scores]


def _percent(value: float) -> str:
    return "-" if math.isnan(value) else f"{value * 100:.2f}"


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def plot_score_histogram(result: AttackResult, path: Path) -> Path:
    """Histogram of genuine (type-I, type-II) and impostor scores with the threshold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind, color in (("impostor", "tab:red"), ("genuine_type1", "tab:green"), ("genuine_type2", "tab:blue")):
        values = [s for _, _, s in result.scores.get(kind, [])]
        if values:
            ax.hist(values, bins=40, alpha=0.5, color=color, label=kind.replace("_", " "))
    threshold = next(iter(result.thresholds.values()), None)
    if threshold is not None:
        ax.axvline(threshold.value, color="k", linestyle="--", label=f"threshold @ FAR {result.far:g}")
    ax.set_xlabel("score")
    ax.set_ylabel("count")
    ax.set_title(f"{result.source} vs {result.matcher}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def attack_matrix(
    sources: List[TemplateSourceSpec],
    matchers: List[MatcherSpec],
    dataset: Dataset,
    far: float = 1e-4,
    *,
    style: str = "sd4_style",
    pairs: Optional[PairList] = None,
    map_config: Optional[MapConfig] = None,
    device: str = "cpu",
    workers: int = 4,
    attack_types: Sequence[str] = ATTACK_TYPES,
) -> AttackReport:
    """
    Fill every (template source × matcher) cell with type-I and type-II TAR.

    A cell is white-box when the source and matcher share a system tag.
    Reconstructions and matcher features are computed once and shared.
    """
    if not sources or not matchers:
        raise ConfigurationError("Attack matrix needs at least one source and one matcher")
    for kind, names in (("source", [s.name for s in sources]), ("matcher", [m.name for m in matchers])):
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Duplicate {kind} names: {names}")
    pairs = pairs or build_pairs(dataset, style)
    if map_config is None:
        h, w = dataset.impressions()[0].image.shape
        map_config = MapConfig(height=h, width=w)

    built_sources = [create_template_source(s, map_config, device) for s in sources]
    built_matchers = [create_matcher(m, device) for m in matchers]
    cache = ScoreCache()
    results = {}
    for source, source_spec in zip(built_sources, sources):
        for matcher, matcher_spec in zip(built_matchers, matchers):
            spec = AttackSpec(
                attack_types=list(attack_types), source=source_spec, matcher=matcher_spec, far=far
            )
            results[(source.name, matcher.name)] = run_attack(
                spec, dataset, pairs, source=source, matcher=matcher, workers=workers, cache=cache
            )
    return AttackReport.from_results(
        results, [s.name for s in sources], [m.name for m in matchers], far
    )


def load_report(report_dir: Path, far: Optional[float] = None) -> AttackReport:
    """
    Rebuild a report from persisted distributions, optionally at a new FAR.

    Raises:
        DependencyError: If the report files are missing
    """
    report_dir = Path(report_dir)
    cells_path, dist_path = report_dir / "report.csv", report_dir / "distributions.csv"
    for path in (cells_path, dist_path):
        if not path.exists():
            raise DependencyError(f"Missing report file {path}", dependency=str(report_dir))
    cells = pd.read_csv(cells_path)
    dist = pd.read_csv(dist_path, dtype={"probe_id": str, "gallery_id": str})
    if far is None:
        meta_path = report_dir / "report.json"
        far = float(json.loads(meta_path.read_text())["far"]) if meta_path.exists() else 1e-4

    sources = list(dict.fromkeys(cells["source"]))
    matchers = list(dict.fromkeys(cells["matcher"]))
    results = {}
    for row in cells.itertuples(index=False):
        subset = dist[(dist["source"] == row.source) & (dist["matcher"] == row.matcher)]
        scores = {
            kind: [(p, g, float(s)) for p, g, s in zip(group["probe_id"], group["gallery_id"], group["score"])]
            for kind, group in subset.groupby("kind", sort=False)
        }
        scores.setdefault("impostor", [])
        base = AttackResult(row.source, row.matcher, bool(row.white_box), far, scores)
        results[(row.source, row.matcher)] = base.rescore(far, _present_types(scores))
    return AttackReport.from_results(results, sources, matchers, far)


# ---------------------------------------------------------------------------
# Reconstruction inspection
# ---------------------------------------------------------------------------


def mean_abs_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute pixel difference of two images of equal shape."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"Cannot compare images of shapes {a.shape} and {b.shape}")
    return float(np.mean(np.abs(a - b)))


def ridge_overlay(source: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    """
    The reconstruction's binarized ridges drawn in red over the source image.

    Returns:
        H×W×3 uint8 image (RGB)
    """
    if np.shape(source) != np.shape(reconstruction):
        raise ContractError(
            f"Overlay needs equal shapes, got {np.shape(source)} and {np.shape(reconstruction)}"
        )
    gray = to_uint8(np.asarray(source))
    overlay = np.stack([gray, gray, gray], axis=-1)
    ridges = binarize(np.asarray(reconstruction))
    overlay[ridges] = (overlay[ridges] * 0.4 + np.array([255, 0, 0]) * 0.6).astype(np.uint8)
    return overlay
