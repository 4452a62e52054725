import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semloc.model_ingest import load_dataset
from semloc.semantic_map import build_semantic_map
from semloc.synth import CorruptionSpec, SceneSpec, corrupt, generate_scene


@pytest.fixture(scope="session")
def clean_scene(tmp_path_factory):
    """Noiseless small scene: exact projections, exact labels."""
    root = tmp_path_factory.mktemp("clean_scene")
    spec = SceneSpec(n_points=200, n_db_images=12, n_queries=4, pixel_sigma=0.0, seed=3)
    gt = generate_scene(spec, root)
    return gt


@pytest.fixture(scope="session")
def clean_dataset(clean_scene):
    return load_dataset(clean_scene.root)


@pytest.fixture(scope="session")
def clean_map(clean_dataset):
    return build_semantic_map(
        clean_dataset.model, clean_dataset.db_rasters, clean_dataset.class_table
    )


@pytest.fixture(scope="session")
def noisy_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("noisy_scene")
    spec = SceneSpec(n_points=250, n_db_images=14, n_queries=5, pixel_sigma=0.5, seed=11)
    return generate_scene(spec, root)


@pytest.fixture(scope="session")
def noisy_dataset(noisy_scene):
    return load_dataset(noisy_scene.root)


@pytest.fixture(scope="session")
def noisy_map(noisy_dataset):
    return build_semantic_map(
        noisy_dataset.model, noisy_dataset.db_rasters, noisy_dataset.class_table
    )


@pytest.fixture(scope="session")
def decoy_bundle(tmp_path_factory):
    """Noisy scene plus retrieval decoys with permuted labels (the
    two-cluster corruption scenario)."""
    clean = tmp_path_factory.mktemp("decoy_clean")
    corrupted = tmp_path_factory.mktemp("decoy_corrupted")
    spec = SceneSpec(n_points=300, n_db_images=14, n_queries=8, pixel_sigma=0.5, seed=11)
    gt = generate_scene(spec, clean)
    manifest = corrupt(clean, corrupted, CorruptionSpec(wrong_retrieval_rate=0.5), seed=99)
    return gt, corrupted, manifest
