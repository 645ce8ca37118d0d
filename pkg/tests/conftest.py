import sys
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vsr.data import load_manifest, load_utterances, make_split, synth_generate
from vsr.numerics import Rng

# Shared synthetic benchmark: 4 motion classes, 6 subjects, 5 repetitions,
# 20 frames of 26x44. Subjects s00-s03 train, s04 validates, s05 is held out.
BENCH_SEED = 7


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench_data")
    synth_generate(classes=4, subjects=6, reps=5, frames=20,
                   height=26, width=44, seed=BENCH_SEED, out_dir=root)
    return root


@pytest.fixture(scope="session")
def bench(bench_dir):
    manifest = load_manifest(bench_dir)
    split = make_split(
        manifest,
        "custom",
        Rng(BENCH_SEED),
        train_subjects=["s00", "s01", "s02", "s03"],
        val_subjects=["s04"],
        test_subjects=["s05"],
    )
    return SimpleNamespace(
        root=bench_dir,
        manifest=manifest,
        split=split,
        train=load_utterances(bench_dir, manifest, split.train),
        val=load_utterances(bench_dir, manifest, split.val),
        test=load_utterances(bench_dir, manifest, split.test),
    )
