"""Session fixtures: fixture binaries, tiny C programs, and corpus builds."""

from __future__ import annotations

import os
import shutil
import subprocess

import pytest

from flipscan import elfimage
from flipscan.corpus import (
    CompilerConfig,
    FamilyPlan,
    build_entry,
    build_family,
    generative_spec,
    make_fake_dataset,
    mlp_spec,
    train,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

_C_PROGRAMS = {
    "ok": r"""
#include <stdio.h>
int main(void) { puts("ok"); return 0; }
""",
    "segv": r"""
int main(void) { volatile int *p = 0; return *p; }
""",
    "loop": r"""
int main(void) { for (;;) {} return 0; }
""",
    "badout": r"""
#include <stdio.h>
int main(void) { puts("not-a-class-index"); return 0; }
""",
    "exit3": r"""
int main(void) { return 3; }
""",
}


def _require_gcc() -> str:
    cc = shutil.which("gcc")
    if cc is None:
        pytest.skip("gcc not available")
    return cc


@pytest.fixture(scope="session")
def fixtures_dir() -> str:
    return FIXTURES


@pytest.fixture(scope="session")
def mini_path() -> str:
    path = os.path.join(FIXTURES, "mini.elf")
    assert os.path.exists(path), "run tools/make_fixtures.py to regenerate fixtures"
    return path


@pytest.fixture(scope="session")
def mini_img(mini_path):
    return elfimage.load(mini_path)


@pytest.fixture(scope="session")
def cprogs(tmp_path_factory):
    """Compiled throwaway programs exercising every harness outcome."""
    cc = _require_gcc()
    root = tmp_path_factory.mktemp("cprogs")
    bins = {}
    for name, src in _C_PROGRAMS.items():
        c_path = root / f"{name}.c"
        c_path.write_text(src)
        bin_path = root / name
        subprocess.run(
            [cc, "-O0", str(c_path), "-o", str(bin_path)],
            check=True, capture_output=True,
        )
        bins[name] = str(bin_path)
    return bins


# --- corpus builds (session-scoped; lazy, so unit runs stay fast) -----------


@pytest.fixture(scope="session")
def runtime_dir() -> str:
    path = os.path.join(os.path.dirname(__file__), "..", "runtime")
    return os.path.abspath(path)


@pytest.fixture(scope="session")
def mlp_bundle():
    """(spec, weights, dataset) for one well-trained dense model."""
    spec = mlp_spec()
    ds = make_fake_dataset(11, 256, spec.input_shape, spec.class_count)
    ws = train(spec, ds, epochs=200, lr=0.05, seed=5011)
    return spec, ws, ds


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def entry_o3(mlp_bundle, corpus_root, runtime_dir):
    spec, ws, ds = mlp_bundle
    return build_entry(
        spec, ws, CompilerConfig("O3", True), corpus_root, "unit-o3-avx2",
        runtime_dir=runtime_dir, check_inputs=ds.inputs[:32],
    )


@pytest.fixture(scope="session")
def entry_o0(mlp_bundle, corpus_root, runtime_dir):
    spec, ws, ds = mlp_bundle
    return build_entry(
        spec, ws, CompilerConfig("O0", True), corpus_root, "unit-o0-avx2",
        runtime_dir=runtime_dir, check_inputs=ds.inputs[:32],
    )


@pytest.fixture(scope="session")
def entry_novec(mlp_bundle, corpus_root, runtime_dir):
    spec, ws, ds = mlp_bundle
    return build_entry(
        spec, ws, CompilerConfig("O3", False), corpus_root, "unit-o3-novec",
        runtime_dir=runtime_dir, check_inputs=ds.inputs[:32],
    )


@pytest.fixture(scope="session")
def gen_bundle():
    # The squashing head trains by tanh regression, which fits much more
    # slowly than the softmax head; it needs a wider hidden layer, a small
    # sample count, and small batches to clear the well-trained bar.
    spec = generative_spec(hidden=64)
    ds = make_fake_dataset(21, 48, spec.input_shape, spec.class_count)
    ws = train(spec, ds, epochs=800, lr=0.05, seed=5021, batch_size=8)
    return spec, ws, ds


@pytest.fixture(scope="session")
def gen_entry(gen_bundle, corpus_root, runtime_dir):
    spec, ws, ds = gen_bundle
    return build_entry(
        spec, ws, CompilerConfig("O3", True), corpus_root, "unit-gen",
        runtime_dir=runtime_dir, check_inputs=ds.inputs[:32],
    )


@pytest.fixture(scope="session")
def family(tmp_path_factory, runtime_dir):
    """The 10-member + victim acceptance family (default plan)."""
    root = str(tmp_path_factory.mktemp("family"))
    plan = FamilyPlan(spec=mlp_spec())
    return build_family(plan, root, runtime_dir=runtime_dir)


@pytest.fixture(scope="session")
def small_family(tmp_path_factory, runtime_dir):
    """A 2-member family for CLI-level tests (cheap to build)."""
    root = str(tmp_path_factory.mktemp("family-small"))
    plan = FamilyPlan(spec=mlp_spec(), n=2, base_seed=400, dataset_size=96, epochs=200)
    return build_family(plan, root, runtime_dir=runtime_dir)
