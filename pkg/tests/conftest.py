"""Shared fixtures: synthetic stocks, trained models, and a tiny pipeline run.

Session-scoped fixtures keep the expensive artifacts (trained encoders, the
end-to-end pipeline directory) built exactly once; everything derived from
them is deterministic, so tests may share them freely.
"""

import json
import time

import numpy as np
import pytest

from marl import cli
from marl.ingest import FootprintRecord, filter_residential, preprocess_record
from marl.synth import GeneratorSpec, generate_footprints
from marl.vqae import VqConfig, VqModel, pretrain


def make_square_record(rec_id="sq-1", side=10.0, height=10.0, use_class="MFH",
                       vintage=2020, program="apartment", origin=(0.0, 0.0)):
    x0, y0 = origin
    poly = [(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)]
    return FootprintRecord(
        id=rec_id, polygon=poly, height_m=height, area_m2=side * side,
        program=program, vintage_year=vintage, use_class=use_class,
        shape_family="rectangle",
    )


@pytest.fixture
def square_record():
    return make_square_record()


def build_stock(seed, n, side_px, **spec_kw):
    spec = GeneratorSpec(n=n, seed=seed, **spec_kw)
    records = filter_residential(generate_footprints(spec))
    images = np.stack([
        preprocess_record(r, 224, side_px, 1.0).channels for r in records
    ])
    return records, images


@pytest.fixture(scope="session")
def tiny_stock():
    """32 buildings at side_px=16: cheap enough for unit-level model tests."""
    return build_stock(seed=7, n=32, side_px=16)


@pytest.fixture(scope="session")
def tiny_model(tiny_stock):
    _, images = tiny_stock
    cfg = VqConfig(side_px=16, codebook_size=8, seed=7)
    model = VqModel.build(cfg)
    history = pretrain(model, images, epochs=2, seed=7, batch_size=8)
    return model, history


@pytest.fixture(scope="session")
def desk_stock():
    """The 200-building stock used for desk-scale training acceptance."""
    return build_stock(seed=0, n=200, side_px=56)


@pytest.fixture(scope="session")
def desk_model(desk_stock):
    """30-epoch pretrained encoder shared by the training and estimator criteria.

    Returns (model, history, wall_seconds); wall time includes only training.
    """
    _, images = desk_stock
    cfg = VqConfig(side_px=56, codebook_size=64, seed=0)
    model = VqModel.build(cfg)
    start = time.monotonic()
    history = pretrain(model, images, epochs=30, seed=0, batch_size=16)
    return model, history, time.monotonic() - start


def tiny_run_config(out_dir):
    return {
        "paths": {"out": str(out_dir)},
        "preprocessing": {"base_px": 64, "side_px": 16, "meters_per_pixel": 1.0},
        "model": {"codebook_size": 16, "seed": 0},
        "training": {"epochs": 2, "batch_size": 8, "finetune": True},
        "clustering": {
            "reduction": "pca", "components": 4,
            "k": {"SFH": 2, "MFH": 1}, "k_range": [1, 2, 3],
            "restarts": 3, "seed": 0,
        },
        "synth": {"n": 24, "seed": 5, "height_range": [5.0, 20.0]},
    }


ALL_STAGES = ("synth", "ingest", "train", "embed", "cluster",
              "archetypes", "evaluate", "plot")


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """One full tiny pipeline run; returns (out_dir, config_path)."""
    root = tmp_path_factory.mktemp("pipeline")
    out_dir = root / "out"
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(tiny_run_config(out_dir)))
    for stage in ALL_STAGES:
        rc = cli.main([stage, "--config", str(cfg_path)])
        assert rc == 0, f"stage {stage} failed"
    return out_dir, cfg_path
