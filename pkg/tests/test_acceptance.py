"""Training-scale acceptance runs on synthetic data.

Deselected by default; run with ``pytest -m slow``. The pipeline fixture
drives the CLI end to end: 200 training fingers, 100 disjoint eval fingers,
reduced profile.
"""

import numpy as np
import pytest
from click.testing import CliRunner

from til.cli import main
from til.codec import angle_distance, rasterize
from til.config import (
    EvaluateConfig,
    LabConfig,
    MapConfig,
    MatcherSpec,
    NetworkProfile,
    SynthConfig,
    TemplateSourceSpec,
    TrainConfig,
)
from til.evaluation import build_pairs, load_report, mean_abs_difference, separability_auc
from til.matchers import embedding_match, minutiae_match
from til.networks import (
    embed,
    extract_minutiae_learned,
    generate,
    load_embedder,
    load_generator,
    load_map_estimator,
    map_estimator,
    read_manifest,
)
from til.synthdata import build_dataset, load_dataset

pytestmark = pytest.mark.slow

STAGES = ["map-estimator", "embedder-a", "embedder-b", "invert-minutiae", "invert-deep"]


def test_synthetic_dataset_separability():
    """Test that ground-truth templates separate genuine from impostor pairs."""
    dataset = build_dataset(100, 2, NetworkProfile.reduced(), seed=1, config=SynthConfig(n_fingers=100))
    pairs = build_pairs(dataset, "sd4_style")
    templates = {imp.impression_id: imp.template for imp in dataset.impressions()}

    def score(pair_list):
        return [minutiae_match(templates[p], templates[g]).value for p, g in pair_list]

    auc = separability_auc(score(pairs.genuine), score(pairs.impostor))
    assert auc >= 0.95


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    """Synthesize, train every stage and evaluate twice through the CLI."""
    root = tmp_path_factory.mktemp("lab")
    checkpoints = root / "checkpoints"
    config = LabConfig(
        dataset=root / "data",
        checkpoint_dir=checkpoints,
        synth=SynthConfig(n_fingers=300, eval_fingers=100, seed=1),
        train=TrainConfig(seed=0),
        evaluate=EvaluateConfig(
            dataset=root / "data",
            split="eval",
            far=0.01,
            histograms=False,
            sources=[
                TemplateSourceSpec(
                    name="classical",
                    kind="classical",
                    inverter_checkpoint=checkpoints / "invert-minutiae",
                ),
                TemplateSourceSpec(
                    name="deep",
                    kind="deep",
                    system="embedder-a",
                    inverter_checkpoint=checkpoints / "invert-deep",
                    embedder_checkpoint=checkpoints / "embedder-a",
                ),
            ],
            matchers=[
                MatcherSpec(name="minutiae", kind="minutiae", system="classical"),
                MatcherSpec(
                    name="embedder-a",
                    kind="embedding",
                    instance="A",
                    embedder_checkpoint=checkpoints / "embedder-a",
                ),
                MatcherSpec(
                    name="embedder-b",
                    kind="embedding",
                    instance="B",
                    embedder_checkpoint=checkpoints / "embedder-b",
                ),
            ],
        ),
    )
    config_path = root / "lab.yaml"
    config.to_yaml(config_path)

    runner = CliRunner()
    commands = [["synth", "--out", str(root / "data")]]
    commands += [["train", stage] for stage in STAGES]
    commands += [["evaluate", "--out", str(root / name)] for name in ("report", "report-again")]
    for command in commands:
        result = runner.invoke(main, command + ["--config", str(config_path)])
        assert result.exit_code == 0, f"{command}: {result.output}"
    return root


@pytest.fixture(scope="module")
def eval_data(lab):
    return load_dataset(lab / "data").split("eval")


class TestPipeline:
    """Attack-matrix trends of the trained pipeline."""

    def test_minutiae_inversion_trend(self, lab):
        """Test type-I success under the minutiae matcher and type-I >= type-II."""
        grid = load_report(lab / "report").grid.sel(source="classical", matcher="minutiae")
        assert float(grid.tar_type1) >= 0.70
        assert float(grid.tar_type1) >= float(grid.tar_type2)

    def test_deep_inversion_white_box_beats_black_box(self, lab):
        """Test that the deep inverter fools its own embedder more than the minutiae matcher."""
        grid = load_report(lab / "report").grid.sel(source="deep")
        assert bool(grid.white_box.sel(matcher="embedder-a"))
        white = float(grid.tar_type1.sel(matcher="embedder-a"))
        assert white - float(grid.tar_type1.sel(matcher="minutiae")) >= 0.20

    def test_report_bytes_are_reproducible(self, lab):
        """Test that rerunning evaluation gives identical report files."""
        for name in ("report.csv", "report.md", "distributions.csv", "failures.csv"):
            assert (lab / "report" / name).read_bytes() == (lab / "report-again" / name).read_bytes()

    def test_held_out_pixel_loss_decreases(self, lab):
        """Test that inverter training lowers the held-out pixel loss."""
        for stage in ("invert-minutiae", "invert-deep"):
            before, after = read_manifest(lab / "checkpoints" / stage)["holdout_pixel_loss"]
            assert after < before


class TestTrainedNetworks:
    """Behavior of the frozen helper networks and the deep inverter."""

    def test_map_estimator_blank_image(self, lab):
        """Test that a blank image yields an almost empty map."""
        me = load_map_estimator(lab / "checkpoints" / "map-estimator")
        blank = np.full((128, 128), -1.0, dtype=np.float32)
        assert map_estimator(me, blank).values.mean() < 0.01

    def test_map_estimator_held_out_error(self, lab, eval_data):
        """Test the per-cell error on held-out impressions."""
        me = load_map_estimator(lab / "checkpoints" / "map-estimator")
        cfg = MapConfig.for_resolution(128)
        errors = [
            np.abs(map_estimator(me, imp.image).values - rasterize(imp.template, cfg).values).mean()
            for imp in eval_data.impressions()[:40]
        ]
        assert float(np.mean(errors)) < 0.02

    def test_map_estimator_recovers_minutiae(self, lab, eval_data):
        """Test that decoded estimates recover planted minutiae."""
        me = load_map_estimator(lab / "checkpoints" / "map-estimator")
        recalls = []
        for imp in eval_data.impressions()[:20]:
            truth = imp.template.minutiae
            if not truth:
                continue
            found = extract_minutiae_learned(me, imp.image).minutiae
            hits = sum(
                any(
                    np.hypot(m.x - e.x, m.y - e.y) <= 4.0 and angle_distance(m.theta, e.theta) <= 0.3
                    for e in found
                )
                for m in truth
            )
            recalls.append(hits / len(truth))
        assert float(np.mean(recalls)) >= 0.80

    def test_embedder_separates_identities(self, lab, eval_data):
        """Test that same-finger cosine beats different-finger cosine."""
        net = load_embedder(lab / "checkpoints" / "embedder-a")
        embeddings = {imp.impression_id: embed(net, imp.image) for imp in eval_data.impressions()}
        rng = np.random.default_rng(0)
        fingers = eval_data.fingers
        wins = 0
        for _ in range(100):
            i, j = rng.choice(len(fingers), size=2, replace=False)
            anchor, same = (embeddings[imp.impression_id] for imp in fingers[i].impressions[:2])
            other = embeddings[fingers[j].impressions[0].impression_id]
            wins += embedding_match(anchor, same).value > embedding_match(anchor, other).value
        assert wins >= 90

    def test_embedder_instances_differ(self, lab, eval_data):
        """Test that embedder-A and embedder-B are genuinely different models."""
        net_a = load_embedder(lab / "checkpoints" / "embedder-a")
        net_b = load_embedder(lab / "checkpoints" / "embedder-b")
        images = [imp.image for imp in eval_data.impressions()[:100]]
        cosines = [abs(float(np.dot(embed(net_a, img).values, embed(net_b, img).values))) for img in images]
        assert np.mean(np.array(cosines) < 0.99) >= 0.95

    def test_deep_reconstructions_follow_identity(self, lab, eval_data):
        """Test that impressions of one finger reconstruct closer than different fingers."""
        net = load_embedder(lab / "checkpoints" / "embedder-a")
        g = load_generator(lab / "checkpoints" / "invert-deep")
        fingers = eval_data.fingers[:20]
        recon = [[generate(g, embed(net, imp.image)) for imp in f.impressions[:2]] for f in fingers]
        same = np.mean([mean_abs_difference(a, b) for a, b in recon])
        different = np.mean(
            [mean_abs_difference(recon[k][0], recon[k + 1][0]) for k in range(len(recon) - 1)]
        )
        assert same < different
