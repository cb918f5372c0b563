"""Corpus pipeline: fake data, training, code emission, builds, families.

The load-bearing oracle here is exactness: the compiled binary and the
in-process reference must produce identical outputs (same argmax labels,
bit-identical vectors), and rebuilding the same entry must reproduce the
same bytes. Weight values must never leak into .text.
"""

from __future__ import annotations

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipscan import elfimage
from flipscan.corpus import (
    ARGMAX_HEAD,
    BadShape,
    CompilerConfig,
    Conv2d,
    Dense,
    FamilyPlan,
    LayerWeights,
    ModelSpec,
    Relu,
    ShapeMismatch,
    SQUASH_HEAD,
    StructureMismatch,
    ToolchainMissing,
    UnderTrained,
    UnsupportedLayer,
    WeightSet,
    build_entry,
    conv_spec,
    emit_kernel_source,
    emit_weight_source,
    find_compiler,
    find_runtime_dir,
    generative_spec,
    load_family,
    make_fake_dataset,
    mlp_spec,
    predict_classes,
    predict_reference,
    quantize_tensor,
    train,
    write_tensor_file,
)
from flipscan.corpus import _cfloat
from flipscan.harness import ExecSpec, RunStatus, run_once
from flipscan.oracles import parse_class_predictions, parse_vector_predictions


@pytest.fixture(scope="module")
def quant_bundle():
    """One well-trained quantized model shared by the int8 tests."""
    spec = mlp_spec(quantized=True)
    ds = make_fake_dataset(31, 256, spec.input_shape, spec.class_count)
    ws = train(spec, ds, epochs=200, lr=0.05, seed=5031)
    return spec, ws, ds


class TestFakeDataset:
    def test_deterministic_per_seed(self):
        a = make_fake_dataset(5, 64, 8, 4)
        b = make_fake_dataset(5, 64, 8, 4)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)
        c = make_fake_dataset(6, 64, 8, 4)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_shapes_and_dtypes(self):
        ds = make_fake_dataset(0, 50, (16, 16, 1), 10)
        assert ds.inputs.shape == (50, 16, 16, 1)
        assert ds.inputs.dtype == np.float32
        assert ds.labels.shape == (50,)
        assert ds.labels.dtype == np.int64
        assert len(ds) == 50

    def test_labels_exactly_balanced(self):
        # 64 samples over 10 classes: every class holds 6 or 7 labels.
        ds = make_fake_dataset(1, 64, 8, 10)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.min() >= 64 // 10
        assert counts.max() <= 64 // 10 + 1
        assert counts.sum() == 64

    def test_single_class(self):
        ds = make_fake_dataset(2, 8, 4, 1)
        assert set(ds.labels.tolist()) == {0}

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(seed=0, n=8, shape=4, class_count=0),
            dict(seed=0, n=3, shape=4, class_count=5),
            dict(seed=0, n=8, shape=(0,), class_count=2),
        ],
    )
    def test_rejects_bad_geometry(self, kwargs):
        with pytest.raises(BadShape):
            make_fake_dataset(**kwargs)


class TestModelSpec:
    def test_mlp_layer_shapes(self):
        spec = mlp_spec(64, 32, 10)
        assert spec.layer_shapes() == [(64,), (32,), (32,), (10,)]
        assert spec.head == ARGMAX_HEAD

    def test_conv_layer_shapes(self):
        spec = conv_spec(16, 4, 10)
        shapes = spec.layer_shapes()
        assert shapes[0] == (16, 16, 1)
        assert shapes[1] == (14, 14, 4)   # 3x3 valid conv
        assert shapes[-1] == (10,)

    def test_generative_head(self):
        spec = generative_spec()
        assert spec.head == SQUASH_HEAD

    def test_head_size_must_match_class_count(self):
        with pytest.raises(ShapeMismatch):
            ModelSpec(input_shape=(8,), layers=(Dense(4),), class_count=10)

    def test_conv_needs_image_input(self):
        with pytest.raises(ShapeMismatch):
            ModelSpec(input_shape=(8,), layers=(Conv2d(2), Dense(2)), class_count=2)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeMismatch):
            ModelSpec(
                input_shape=(2, 2, 1),
                layers=(Conv2d(1, (3, 3)), Dense(2)),
                class_count=2,
            )

    def test_unknown_head_rejected(self):
        with pytest.raises(UnsupportedLayer):
            ModelSpec(input_shape=(4,), layers=(Dense(2),), class_count=2,
                      head="softmax")

    def test_dict_round_trip(self):
        for spec in (mlp_spec(), conv_spec(), generative_spec(),
                     mlp_spec(quantized=True)):
            back = ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
            assert back == spec
            assert back.structure_hash() == spec.structure_hash()

    def test_structure_hash_sensitivity(self):
        assert mlp_spec(64, 32, 10).structure_hash() != \
               mlp_spec(64, 33, 10).structure_hash()
        assert mlp_spec().structure_hash() != \
               mlp_spec(quantized=True).structure_hash()


class TestTraining:
    def test_memorizes_fake_labels(self, mlp_bundle):
        _spec, ws, ds = mlp_bundle
        assert ws.fit_accuracy >= 0.90
        assert ws.dataset_seed == ds.seed

    def test_deterministic(self):
        spec = mlp_spec(32, 16, 4)
        ds = make_fake_dataset(3, 64, spec.input_shape, spec.class_count)
        a = train(spec, ds, epochs=120, lr=0.05, seed=9)
        b = train(spec, ds, epochs=120, lr=0.05, seed=9)
        for x, y in zip(a.tensors, b.tensors):
            if x is None:
                assert y is None
                continue
            assert np.array_equal(x.w, y.w) and np.array_equal(x.b, y.b)

    def test_seed_changes_weights(self):
        spec = mlp_spec(32, 16, 4)
        ds = make_fake_dataset(3, 64, spec.input_shape, spec.class_count)
        a = train(spec, ds, epochs=120, lr=0.05, seed=9)
        c = train(spec, ds, epochs=120, lr=0.05, seed=10)
        assert any(
            x is not None and not np.array_equal(x.w, y.w)
            for x, y in zip(a.tensors, c.tensors)
        )

    def test_zero_epochs_undertrained(self):
        spec = mlp_spec(32, 16, 4)
        ds = make_fake_dataset(3, 64, spec.input_shape, spec.class_count)
        with pytest.raises(UnderTrained):
            train(spec, ds, epochs=0, seed=9)

    def test_shape_mismatch_rejected(self):
        spec = mlp_spec(32, 16, 4)
        wrong_shape = make_fake_dataset(3, 64, 16, 4)
        with pytest.raises(ShapeMismatch):
            train(spec, wrong_shape, epochs=1)
        wrong_classes = make_fake_dataset(3, 64, 32, 5)
        with pytest.raises(ShapeMismatch):
            train(spec, wrong_classes, epochs=1)


class TestWeightSetIO:
    def test_save_load_round_trip(self, tmp_path, mlp_bundle):
        _spec, ws, _ds = mlp_bundle
        path = str(tmp_path / "weights.npz")
        ws.save(path)
        back = WeightSet.load(path)
        assert back.dataset_seed == ws.dataset_seed
        assert back.train_seed == ws.train_seed
        assert back.epochs == ws.epochs
        assert back.lr == ws.lr
        assert back.fit_accuracy == ws.fit_accuracy
        for x, y in zip(ws.tensors, back.tensors):
            if x is None:
                assert y is None
                continue
            assert np.array_equal(x.w, y.w) and np.array_equal(x.b, y.b)
            assert (x.qw is None) == (y.qw is None)

    def test_quantized_round_trip(self, tmp_path, quant_bundle):
        _spec, ws, _ds = quant_bundle
        path = str(tmp_path / "q.npz")
        ws.save(path)
        back = WeightSet.load(path)
        for x, y in zip(ws.tensors, back.tensors):
            if x is None:
                continue
            assert np.array_equal(x.qw, y.qw)
            assert x.qscale == y.qscale


class TestQuantization:
    def test_peak_maps_to_127(self):
        w = np.array([[0.5, -2.0], [1.0, 0.25]], dtype=np.float32)
        q, scale = quantize_tensor(w)
        assert scale == pytest.approx(2.0 / 127.0)
        assert q.dtype == np.int8
        assert q[0, 1] == -127

    def test_zero_tensor(self):
        q, scale = quantize_tensor(np.zeros((3, 3), dtype=np.float32))
        assert scale == 1.0 and not q.any()

    def test_reconstruction_error_bounded(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((32, 16)).astype(np.float32)
        q, scale = quantize_tensor(w)
        assert np.max(np.abs(q.astype(np.float32) * scale - w)) <= scale / 2 + 1e-7


class TestReferencePredictions:
    def _hand_weights(self, *layers):
        """One entry per spec layer: an (w, b) pair or None for Relu."""
        tensors = tuple(
            None
            if entry is None
            else LayerWeights(
                np.asarray(entry[0], np.float32), np.asarray(entry[1], np.float32)
            )
            for entry in layers
        )
        return WeightSet(tensors, 0, 0, 0, 0.0, 1.0)

    def test_hand_computed_dense(self):
        spec = ModelSpec(input_shape=(2,), layers=(Dense(2),), class_count=2)
        ws = self._hand_weights(([[1.0, 0.0], [0.0, 2.0]], [0.5, -0.5]))
        x = np.array([[1.0, 1.0]], dtype=np.float32)
        out = predict_reference(spec, ws, x)
        assert np.array_equal(out, np.array([[1.5, 1.5]], dtype=np.float32))
        # Tie: first maximum wins, matching the emitted argmax loop.
        assert predict_classes(spec, ws, x).tolist() == [0]

    def test_relu_clamps(self):
        spec = ModelSpec(input_shape=(2,), layers=(Dense(2), Relu()), class_count=2)
        ws = self._hand_weights(([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]), None)
        x = np.array([[-4.0, 2.0]], dtype=np.float32)
        out = predict_reference(spec, ws, x)
        assert out.tolist() == [[0.0, 2.0]]

    def test_squash_saturates_at_unit(self):
        spec = ModelSpec(input_shape=(1,), layers=(Dense(1),), class_count=1,
                         head=SQUASH_HEAD)
        ws = self._hand_weights(([[1.0]], [0.0]))
        x = np.array([[100.0], [-100.0], [0.0]], dtype=np.float32)
        out = predict_reference(spec, ws, x)
        assert out.tolist() == [[1.0], [-1.0], [0.0]]
        assert np.all(np.abs(out) <= 1.0)

    def test_input_shape_checked(self):
        spec = mlp_spec(8, 4, 2)
        ws = self._hand_weights(
            (np.zeros((8, 4)), np.zeros(4)), None, (np.zeros((4, 2)), np.zeros(2))
        )
        with pytest.raises(ShapeMismatch):
            predict_reference(spec, ws, np.zeros((2, 9), dtype=np.float32))

    def test_quantized_agreement_with_float(self, quant_bundle):
        spec_q, ws, _ds = quant_bundle
        probe = make_fake_dataset(32, 200, spec_q.input_shape, spec_q.class_count)
        agree = float(np.mean(
            predict_classes(spec_q, ws, probe.inputs)
            == predict_classes(mlp_spec(quantized=False), ws, probe.inputs)
        ))
        assert agree >= 0.95


class TestSourceEmission:
    def test_cfloat_exact_round_trip(self):
        for v in (0.1, -1.5, 3.0, 1e-30, -7.25e8, 1.0000001):
            s = _cfloat(np.float32(v))
            assert s.endswith("f")
            assert np.float32(s[:-1]) == np.float32(v)

    @given(st.floats(width=32, allow_nan=False, allow_infinity=False))
    @settings(max_examples=300, deadline=None)
    def test_cfloat_round_trip_property(self, v):
        s = _cfloat(np.float32(v))
        assert np.float32(s[:-1]) == np.float32(v)

    def test_integral_values_stay_floats(self):
        assert _cfloat(2.0) == "2.0f"
        assert _cfloat(-8.0) == "-8.0f"

    def test_weight_source_holds_values_kernel_does_not(self, mlp_bundle):
        spec, ws, _ds = mlp_bundle
        weights_src = emit_weight_source(spec, ws)
        kernel_src = emit_kernel_source(spec, ws)
        # The weight TU defines the arrays; the kernel TU only declares them.
        assert "const float W0[64][32] = {" in weights_src
        assert "extern const float W0[64][32];" in kernel_src
        assert "extern const float B2[10];" in kernel_src
        assert "main" not in weights_src
        assert "int main" in kernel_src
        # A distinctive trained value appears only in the weight TU.
        probe = _cfloat(float(ws.tensors[0].w[0, 0]))
        assert probe in weights_src
        assert probe not in kernel_src

    def test_quantized_emission(self, quant_bundle):
        spec, ws, _ds = quant_bundle
        weights_src = emit_weight_source(spec, ws)
        kernel_src = emit_kernel_source(spec, ws)
        assert "const int8_t W0[64][32] = {" in weights_src
        assert "const float W0_scale = " in weights_src
        assert "extern const int8_t W0[64][32];" in kernel_src
        assert "extern const float W0_scale;" in kernel_src

    def test_nonfinite_weights_rejected(self):
        spec = mlp_spec(4, 2, 2)
        w0 = np.zeros((4, 2), np.float32)
        w0[0, 0] = np.nan
        ws = WeightSet(
            (
                LayerWeights(w0, np.zeros(2, np.float32)),
                None,
                LayerWeights(np.zeros((2, 2), np.float32), np.zeros(2, np.float32)),
            ),
            0, 0, 0, 0.0, 1.0,
        )
        with pytest.raises(UnsupportedLayer):
            emit_weight_source(spec, ws)


class TestTensorFile:
    def test_header_and_rows(self, tmp_path):
        inputs = np.arange(8, dtype=np.float32).reshape(2, 4) / 3.0
        path = str(tmp_path / "t.txt")
        write_tensor_file(path, inputs, 10)
        lines = open(path).read().splitlines()
        assert lines[0] == "FSCN1 2 2 4 10 f32"
        assert len(lines) == 3
        back = np.array(
            [[np.float32(tok) for tok in line.split()] for line in lines[1:]],
            dtype=np.float32,
        )
        assert np.array_equal(back, inputs)

    def test_image_shape_flattens_rows(self, tmp_path):
        inputs = np.random.default_rng(0).standard_normal((3, 4, 4, 1)).astype(np.float32)
        path = str(tmp_path / "img.txt")
        write_tensor_file(path, inputs, 2)
        lines = open(path).read().splitlines()
        assert lines[0] == "FSCN1 4 3 4 4 1 2 f32"
        assert all(len(line.split()) == 16 for line in lines[1:])


class TestToolchainDiscovery:
    def test_explicit_runtime_dir(self, runtime_dir):
        assert find_runtime_dir(runtime_dir) == runtime_dir

    def test_env_runtime_dir(self, runtime_dir, monkeypatch, tmp_path):
        monkeypatch.setenv("FSCN_RUNTIME_DIR", runtime_dir)
        monkeypatch.chdir(tmp_path)
        assert find_runtime_dir() == runtime_dir

    def test_missing_runtime_dir(self, monkeypatch, tmp_path):
        monkeypatch.delenv("FSCN_RUNTIME_DIR", raising=False)
        monkeypatch.chdir(tmp_path)
        with pytest.raises(ToolchainMissing):
            find_runtime_dir(str(tmp_path / "nowhere"))

    def test_compiler_found(self):
        assert os.path.isfile(find_compiler())

    def test_compiler_missing(self, monkeypatch):
        monkeypatch.setenv("CC", "no-such-compiler-xyz")
        with pytest.raises(ToolchainMissing):
            find_compiler()


class TestCompilerConfig:
    def test_flags(self):
        vec = CompilerConfig("O3", True).flags()
        assert "-O3" in vec and "-mavx2" in vec and "-mfma" in vec
        assert "-ffp-contract=off" in vec
        novec = CompilerConfig("O3", False).flags()
        assert "-fno-tree-vectorize" in novec and "-mavx2" not in novec

    def test_tags(self):
        assert CompilerConfig("O3", True).tag() == "o3-avx2"
        assert CompilerConfig("O0", False).tag() == "o0-novec"

    def test_bad_opt_level(self):
        with pytest.raises(ValueError):
            CompilerConfig("O2", True)

    def test_config_hash_distinguishes(self):
        assert CompilerConfig("O3", True).config_hash() != \
               CompilerConfig("O3", False).config_hash()


def _run_binary(binary, inputs, class_count, tmp_path):
    eval_path = str(tmp_path / "probe.txt")
    write_tensor_file(eval_path, inputs, class_count)
    out = run_once(ExecSpec(binary=binary, argv=(eval_path,), timeout_ms=30000))
    assert out.status is RunStatus.COMPLETED
    return out.stdout


class TestBuiltEntries:
    def test_entry_artifacts(self, entry_o3):
        d = os.path.dirname(entry_o3.binary_path)
        assert os.access(entry_o3.binary_path, os.X_OK)
        for name in ("model.c", "weights.c", "entry.json", "weights.npz"):
            assert os.path.exists(os.path.join(d, name)), name
        img = elfimage.load(entry_o3.binary_path)
        assert img.text_sha256() == entry_o3.text_sha256
        assert img.file_sha256() == entry_o3.file_sha256

    def test_binary_matches_reference_exactly(self, entry_o3, tmp_path):
        spec = entry_o3.spec
        fresh = make_fake_dataset(777, 64, spec.input_shape, spec.class_count)
        stdout = _run_binary(entry_o3.binary_path, fresh.inputs,
                             spec.class_count, tmp_path)
        got = parse_class_predictions(stdout, 64, spec.class_count)
        want = predict_classes(spec, entry_o3.weights, fresh.inputs)
        assert got is not None
        assert np.array_equal(got, want)

    @pytest.mark.parametrize("which", ["entry_o0", "entry_novec"])
    def test_other_configs_match_reference(self, which, request, tmp_path):
        entry = request.getfixturevalue(which)
        spec = entry.spec
        fresh = make_fake_dataset(778, 48, spec.input_shape, spec.class_count)
        stdout = _run_binary(entry.binary_path, fresh.inputs,
                             spec.class_count, tmp_path)
        got = parse_class_predictions(stdout, 48, spec.class_count)
        want = predict_classes(spec, entry.weights, fresh.inputs)
        assert np.array_equal(got, want)

    def test_generative_vectors_bit_exact(self, gen_entry, tmp_path):
        spec = gen_entry.spec
        fresh = make_fake_dataset(779, 32, spec.input_shape, spec.class_count)
        stdout = _run_binary(gen_entry.binary_path, fresh.inputs,
                             spec.class_count, tmp_path)
        got = parse_vector_predictions(stdout, 32, spec.class_count)
        want = predict_reference(spec, gen_entry.weights, fresh.inputs)
        assert got is not None
        assert np.array_equal(got, want.astype(np.float32))

    def test_rebuild_is_byte_identical(self, entry_o3, mlp_bundle, tmp_path,
                                       runtime_dir):
        spec, ws, ds = mlp_bundle
        again = build_entry(
            spec, ws, CompilerConfig("O3", True), str(tmp_path),
            "unit-o3-avx2", runtime_dir=runtime_dir,
            check_inputs=ds.inputs[:8],
        )
        assert again.file_sha256 == entry_o3.file_sha256
        assert again.text_sha256 == entry_o3.text_sha256

    def test_configs_change_text(self, entry_o3, entry_o0, entry_novec):
        hashes = {entry_o3.text_sha256, entry_o0.text_sha256,
                  entry_novec.text_sha256}
        assert len(hashes) == 3

    def test_structure_key(self, entry_o3, entry_o0):
        assert entry_o3.structure_key() != entry_o0.structure_key()


class TestWeightTextInvariance:
    def test_text_independent_of_weights(self, small_family):
        fam = small_family
        hashes = {e.text_sha256 for e in fam.entries} | {fam.victim.text_sha256}
        assert len(hashes) == 1
        files = {e.file_sha256 for e in fam.entries} | {fam.victim.file_sha256}
        assert len(files) == len(fam.entries) + 1  # weights do differ

    def test_entries_trained_on_distinct_data(self, small_family):
        fam = small_family
        seeds = [ds.seed for ds in fam.datasets] + [fam.victim_dataset.seed]
        assert len(set(seeds)) == len(seeds)
        assert all(e.weights.fit_accuracy >= 0.90 for e in fam.entries)


class TestFamilyRoundTrip:
    def test_manifest_and_reload(self, small_family):
        fam = small_family
        manifest_path = os.path.join(fam.root, "manifest.json")
        assert os.path.exists(manifest_path)
        doc = json.load(open(manifest_path))
        assert doc["text_sha256"] == fam.victim.text_sha256
        assert len(doc["entries"]) == 2

        back = load_family(fam.root)
        assert [e.entry_id for e in back.entries] == \
               [e.entry_id for e in fam.entries]
        assert back.victim.entry_id == "victim"
        assert back.victim.text_sha256 == fam.victim.text_sha256
        assert np.array_equal(back.victim_dataset.inputs,
                              fam.victim_dataset.inputs)

    def test_dataset_of(self, small_family):
        fam = small_family
        assert fam.dataset_of(fam.entries[0]) is fam.datasets[0]
        assert fam.dataset_of(fam.victim) is fam.victim_dataset
        with pytest.raises(KeyError):
            from dataclasses import replace
            fam.dataset_of(replace(fam.entries[0], entry_id="ghost"))

    def test_plan_round_trip(self):
        plan = FamilyPlan(spec=mlp_spec(), n=3, base_seed=7,
                          dataset_size=128, epochs=99, lr=0.01)
        back = FamilyPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
        assert back == plan

    def test_mixed_structure_rejected(self, small_family):
        from dataclasses import replace

        from flipscan.superbits import check_same_structure

        fam = small_family
        fake = replace(fam.entries[1], text_sha256="0" * 64)
        with pytest.raises(StructureMismatch):
            check_same_structure([fam.entries[0], fake])
