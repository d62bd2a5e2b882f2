"""Tests for the inversion networks, inference entry points and checkpoints."""

import numpy as np
import pytest
import torch

from til.codec import MinutiaeTemplate, rasterize
from til.config import MapConfig, NetworkProfile
from til.exceptions import ContractError, DependencyError, UsageError
from til.losses import ortho_reg
from til.networks import (
    EMBEDDING_DIM,
    Embedding,
    MapEstimatorNet,
    build_discriminator,
    build_embedder,
    build_generator_e,
    build_generator_m,
    build_map_estimator,
    embed,
    freeze,
    generate,
    global_sum_pool,
    load_embedder,
    load_generator,
    load_map_estimator,
    map_estimator,
    parameter_hash,
    read_manifest,
    save_checkpoint,
    trace_for,
    trace_hash,
    weight_matrices,
)

NL = "Non-Local Block ({0} × {0})"
TAIL = [
    ("Batch Normalization, ReLU", (512, 512, 48)),
    ("Convolution (channels=1, kernel=3×3, stride=1)", (512, 512, 1)),
    ("Tanh", (512, 512, 1)),
]

MINUTIAE_GENERATOR_TABLE = [
    ("Input", (512, 512, 6)),
    ("Enc 0: ResBlock Down + ResBlock", (256, 256, 48)),
    ("Enc 1: ResBlock Down + ResBlock", (128, 128, 96)),
    ("Enc 2: ResBlock Down + ResBlock", (64, 64, 192)),
    (NL.format(192), (64, 64, 192)),
    ("Enc 3: ResBlock Down + ResBlock", (32, 32, 384)),
    ("Dec 0: ResBlock Up + ResBlock", (64, 64, 384)),
    ("Dec 1: ResBlock Up + ResBlock", (128, 128, 192)),
    (NL.format(192), (128, 128, 192)),
    ("Dec 2: ResBlock Up + ResBlock", (256, 256, 96)),
    ("Dec 3: ResBlock Up", (512, 512, 48)),
    *TAIL,
]

DISCRIMINATOR_TABLE = [
    ("Input", (512, 512, 1)),
    ("Disc 0: ResBlock Down", (256, 256, 48)),
    ("Disc 1: ResBlock Down", (128, 128, 96)),
    ("Disc 2: ResBlock Down", (64, 64, 192)),
    (NL.format(192), (64, 64, 192)),
    ("Disc 3: ResBlock Down", (32, 32, 384)),
    ("Disc 4: ResBlock Down", (16, 16, 768)),
    ("ReLU", (16, 16, 768)),
    ("Global Summation Pooling", (768,)),
    ("Linear", (1,)),
]

DEEP_GENERATOR_TABLE = [
    ("Input", (192,)),
    ("Fully Connected", (512,)),
    ("Fully Connected", (768,)),
    ("Reshape", (4, 4, 48)),
    ("Enc 0: ResBlock Up", (8, 8, 768)),
    ("Enc 1: ResBlock Up", (16, 16, 384)),
    ("Enc 2: ResBlock + ResBlock Up", (32, 32, 384)),
    ("Dec 0: ResBlock + ResBlock Up", (64, 64, 384)),
    ("Dec 1: ResBlock + ResBlock Up", (128, 128, 192)),
    (NL.format(192), (128, 128, 192)),
    ("Dec 2: ResBlock + ResBlock Up", (256, 256, 96)),
    ("Dec 3: ResBlock Up", (512, 512, 48)),
    *TAIL,
]


def _input_gradcheck(net: torch.nn.Module, shape, n_entries: int = 4) -> bool:
    """
    Finite-difference check of d(w · net(x))/dx on a few input entries.

    Perturbs a handful of entries of a fixed input and projects the output
    on fixed random weights.
    """
    generator = torch.Generator().manual_seed(0)
    base = torch.rand(shape, dtype=torch.float64, generator=generator)
    entries = torch.randperm(base.numel(), generator=generator)[:n_entries]
    with torch.no_grad():
        out_shape = net(base).shape
    projection = torch.randn(out_shape, dtype=torch.float64, generator=generator)

    def projected(delta: torch.Tensor) -> torch.Tensor:
        x = base.flatten().index_add(0, entries, delta).reshape(shape)
        return (net(x) * projection).sum()

    delta = torch.zeros(n_entries, dtype=torch.float64, requires_grad=True)
    return torch.autograd.gradcheck(projected, (delta,), atol=1e-5, rtol=1e-3)


class TestDimensionTraces:
    """Tests for full-profile layer traces built on the meta device."""

    def test_minutiae_generator_trace(self):
        """Test the minutiae-map generator trace row for row."""
        assert trace_for("minutiae", NetworkProfile.full()) == MINUTIAE_GENERATOR_TABLE

    def test_discriminator_trace(self):
        """Test the discriminator trace row for row."""
        assert trace_for("discriminator", NetworkProfile.full()) == DISCRIMINATOR_TABLE

    def test_deep_generator_trace(self):
        """Test the deep-template generator trace row for row."""
        assert trace_for("deep", NetworkProfile.full()) == DEEP_GENERATOR_TABLE

    def test_reduced_profile_scales_schedule(self):
        """Test the reduced profile halves resolution four times and ends at 128 px."""
        trace = trace_for("minutiae", NetworkProfile.reduced())
        shapes = dict((name, shape) for name, shape in trace if not name.startswith("Non"))
        assert shapes["Input"] == (128, 128, 6)
        assert shapes["Enc 3: ResBlock Down + ResBlock"] == (8, 8, 96)
        assert trace[-1] == ("Tanh", (128, 128, 1))
        deep = trace_for("deep", NetworkProfile.reduced())
        assert deep[-1] == ("Tanh", (128, 128, 1))
        assert "Enc 0: ResBlock Up" not in [name for name, _ in deep]

    def test_trace_hash_tracks_profile(self):
        """Test that the trace hash is stable and profile-dependent."""
        full = trace_hash(trace_for("minutiae", NetworkProfile.full()))
        assert full == trace_hash(MINUTIAE_GENERATOR_TABLE)
        assert full != trace_hash(trace_for("minutiae", NetworkProfile.reduced()))

    def test_unknown_kind(self):
        """Test that untabulated kinds raise ContractError."""
        with pytest.raises(ContractError):
            trace_for("embedder", NetworkProfile.reduced())


class TestForwardPasses:
    """Tests for small-profile forward passes."""

    def test_minutiae_generator_output_range(self, micro_profile):
        """Test that G_m maps a 6-channel map to a 1-channel image in [−1, 1]."""
        g = build_generator_m(micro_profile, init_seed=0)
        out = g(torch.rand(2, 6, 32, 32))
        assert out.shape == (2, 1, 32, 32)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_deep_generator_output_range(self, tiny_profile):
        """Test that G_e maps 192-d embeddings to 64 px images in [−1, 1]."""
        g = build_generator_e(tiny_profile, init_seed=0)
        out = g(torch.randn(2, EMBEDDING_DIM))
        assert out.shape == (2, 1, 64, 64)
        assert out.abs().max() <= 1.0

    def test_deep_generator_needs_64_px(self, micro_profile):
        """Test that G_e rejects resolutions below 64."""
        with pytest.raises(ContractError, match="64"):
            build_generator_e(micro_profile)

    def test_discriminator_emits_one_logit(self, micro_profile):
        """Test the discriminator output shape."""
        d = build_discriminator(micro_profile, init_seed=0)
        assert d(torch.randn(3, 1, 32, 32)).shape == (3, 1)

    def test_orthogonal_init_has_no_penalty(self, tiny_profile):
        """Test that freshly initialized networks have a negligible regularizer."""
        for net in (
            build_generator_m(tiny_profile, init_seed=1),
            build_generator_e(tiny_profile, init_seed=1),
            build_discriminator(tiny_profile, init_seed=1),
        ):
            assert float(ortho_reg(weight_matrices(net), 1e-4)) < 1e-8

    def test_init_seed_is_deterministic(self, micro_profile):
        """Test that the same seed builds identical weights."""
        a = build_generator_m(micro_profile, init_seed=7)
        b = build_generator_m(micro_profile, init_seed=7)
        c = build_generator_m(micro_profile, init_seed=8)
        assert parameter_hash(a) == parameter_hash(b)
        assert parameter_hash(a) != parameter_hash(c)

    @pytest.mark.parametrize(
        "build, shape",
        [
            (lambda p: build_generator_m(p["micro"], init_seed=0), (1, 6, 32, 32)),
            (lambda p: build_generator_e(p["tiny"], init_seed=0), (1, EMBEDDING_DIM)),
            (lambda p: build_discriminator(p["micro"], init_seed=0), (1, 1, 32, 32)),
            (lambda p: build_embedder(3, init_seed=0, width=2), (1, 1, 32, 32)),
        ],
        ids=["generator-m", "generator-e", "discriminator", "embedder"],
    )
    def test_gradients_match_finite_differences(self, build, shape, micro_profile, tiny_profile):
        """Test input gradients of each network against central differences (64-bit)."""
        net = build({"micro": micro_profile, "tiny": tiny_profile}).double().eval()
        assert _input_gradcheck(net, shape)

    def test_global_sum_pool(self):
        """Test spatial summation."""
        x = torch.ones(1, 3, 2, 2)
        assert global_sum_pool(x).tolist() == [[4.0, 4.0, 4.0]]


class TestInference:
    """Tests for generate, map_estimator and embed."""

    def test_generate_from_map(self, micro_profile):
        """Test that generate turns a map into a 2-D image deterministically."""
        g = build_generator_m(micro_profile, init_seed=0)
        template = MinutiaeTemplate.from_array(np.array([[10.0, 12.0, 1.0]]), 32, 32)
        m = rasterize(template, MapConfig.for_resolution(32))
        first, second = generate(g, m), generate(g, m)
        assert first.shape == (32, 32)
        np.testing.assert_array_equal(first, second)

    def test_generate_rejects_wrong_input(self, micro_profile, tiny_profile):
        """Test input kind and size contracts."""
        g = build_generator_m(micro_profile, init_seed=0)
        wrong_size = rasterize(
            MinutiaeTemplate((), 64, 64), MapConfig.for_resolution(64)
        )
        with pytest.raises(ContractError, match="expects"):
            generate(g, wrong_size)
        with pytest.raises(ContractError):
            generate(g, Embedding.zeros())
        with pytest.raises(ContractError):
            generate(build_generator_e(tiny_profile), wrong_size)

    def test_untrained_networks_refuse_inference(self):
        """Test that untrained map estimators and embedders raise UsageError."""
        img = np.zeros((32, 32), dtype=np.float32)
        with pytest.raises(UsageError):
            map_estimator(build_map_estimator(width=2), img)
        with pytest.raises(UsageError):
            embed(build_embedder(3, width=2), img)

    def test_embedding_is_unit_norm(self):
        """Test that embed returns a normalized 192-d Embedding."""
        e = build_embedder(3, width=2)
        e.mark_trained()
        r = embed(e, np.random.default_rng(0).uniform(-1, 1, (64, 64)))
        assert r.normalized
        assert r.values.shape == (EMBEDDING_DIM,)
        assert np.linalg.norm(r.values) == pytest.approx(1.0)

    def test_map_estimator_output(self):
        """Test that the estimator returns a map of the image size in [0, 1]."""
        me = build_map_estimator(width=2)
        me.mark_trained()
        m = map_estimator(me, np.zeros((32, 32), dtype=np.float32))
        assert m.values.shape == (32, 32, 6)
        assert 0.0 <= m.values.min() and m.values.max() <= 1.0

    def test_map_estimator_needs_multiple_of_eight(self):
        """Test the input side contract of the U-shaped estimator."""
        me = MapEstimatorNet(width=2)
        me.mark_trained()
        with pytest.raises(ContractError, match="multiples of 8"):
            map_estimator(me, np.zeros((30, 30), dtype=np.float32))

    def test_map_estimator_passes_gradients_to_image(self):
        """Test gradients through the frozen estimator against finite differences."""
        me = freeze(build_map_estimator(width=2).double())
        me.mark_trained()
        x = torch.randn(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda img: map_estimator(me, img).sum(), (x,))
        assert all(p.grad is None for p in me.parameters())

    def test_embedding_contract(self):
        """Test Embedding dimension and normalization checks."""
        with pytest.raises(ContractError, match="192"):
            Embedding(np.ones(10))
        with pytest.raises(ContractError, match="norm"):
            Embedding(np.ones(EMBEDDING_DIM), normalized=True)
        assert not Embedding.zeros().normalized


class TestCheckpoints:
    """Tests for checkpoint writing and loading."""

    def test_generator_round_trip(self, tmp_path, micro_profile):
        """Test that a saved generator reloads with identical parameters."""
        g = build_generator_m(micro_profile, init_seed=3)
        d = build_discriminator(micro_profile, init_seed=4)
        manifest = {"kind": "minutiae", "profile": micro_profile.model_dump(mode="json")}
        path = save_checkpoint(tmp_path / "invert-minutiae", {"generator": g, "discriminator": d}, manifest)
        loaded = load_generator(path)
        assert parameter_hash(loaded) == parameter_hash(g)
        written = read_manifest(path)
        assert written["parameter_hashes"]["generator"] == parameter_hash(g)
        assert not loaded.training

    def test_overwrite_is_atomic(self, tmp_path):
        """Test that re-saving replaces the directory and leaves no temporaries."""
        me = build_map_estimator(init_seed=0, width=2)
        target = tmp_path / "map-estimator"
        save_checkpoint(target, {"map_estimator": me}, {"kind": "map-estimator", "width": 2})
        me.mark_trained()
        save_checkpoint(target, {"map_estimator": me}, {"kind": "map-estimator", "width": 2})
        assert sorted(p.name for p in tmp_path.iterdir()) == ["map-estimator"]
        assert load_map_estimator(target).trained

    def test_embedder_round_trip(self, tmp_path):
        """Test that the trained flag and weights survive reload."""
        e = build_embedder(4, init_seed=2, width=2)
        e.mark_trained()
        manifest = {"kind": "embedder", "instance": "A", "num_classes": 4, "width": 2}
        path = save_checkpoint(tmp_path / "embedder-a", {"embedder": e}, manifest)
        loaded = load_embedder(path)
        assert loaded.trained
        assert parameter_hash(loaded) == parameter_hash(e)

    def test_kind_mismatch(self, tmp_path):
        """Test that loaders check the checkpoint kind."""
        me = build_map_estimator(width=2)
        path = save_checkpoint(tmp_path / "me", {"map_estimator": me}, {"kind": "map-estimator", "width": 2})
        with pytest.raises(ContractError, match="not an embedder"):
            load_embedder(path)
        with pytest.raises(ContractError, match="not an inverter"):
            load_generator(path)

    def test_missing_checkpoint(self, tmp_path):
        """Test that a missing manifest is a DependencyError naming the directory."""
        with pytest.raises(DependencyError) as excinfo:
            read_manifest(tmp_path / "absent")
        assert excinfo.value.dependency == str(tmp_path / "absent")
