import numpy as np
import pytest

ACCEPTANCE_RESULTS: dict[str, bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and item.fspath.basename == "test_acceptance.py":
        ACCEPTANCE_RESULTS[item.name] = rep.passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ACCEPTANCE_RESULTS[name] else "FAIL"
        terminalreporter.write_line(f"  {name}: {status}")

from synthloc.geometry import MatchParams, score_world_variants
from synthloc.variants import VariantStore, default_prompt_set, generate_all_variants
from synthloc.worldgen import (
    CameraIntrinsics,
    CameraPose,
    LocalFeature,
    ViewImage,
    WorldConfig,
    generate_world,
)

SMALL_WORLD = WorldConfig(
    num_landmarks=250,
    descriptor_dim=16,
    num_map_views=16,
    num_query_views=8,
    street_length=80.0,
)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_WORLD, seed=3)


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig(), seed=7)


@pytest.fixture(scope="session")
def small_prompts():
    return default_prompt_set(SMALL_WORLD.descriptor_dim, seed=0)


@pytest.fixture(scope="session")
def small_variants(small_world, small_prompts):
    return generate_all_variants(small_world, small_prompts, seed=0)


@pytest.fixture(scope="session")
def small_variant_store(small_variants):
    return VariantStore.from_mapping(small_variants)


@pytest.fixture(scope="session")
def small_scores(small_world, small_variants):
    return score_world_variants(small_world, small_variants, MatchParams())


def make_view(rng, n_features, d, view_id=0, condition="original", n_clutter=0, image_size=(640, 480)):
    """Free-standing view with random unit descriptors and distinct landmark ids."""
    intr = CameraIntrinsics(
        focal=400.0,
        principal_point=np.array([image_size[0] / 2, image_size[1] / 2]),
        image_size=image_size,
    )
    pose = CameraPose(rotation=np.array([1.0, 0.0, 0.0, 0.0]), position=np.zeros(3))
    feats = []
    for i in range(n_features):
        desc = rng.standard_normal(d)
        feats.append(
            LocalFeature(
                keypoint=rng.uniform([0, 0], image_size),
                descriptor=desc / np.linalg.norm(desc),
                landmark_id=i,
            )
        )
    for _ in range(n_clutter):
        desc = rng.standard_normal(d)
        feats.append(
            LocalFeature(
                keypoint=rng.uniform([0, 0], image_size),
                descriptor=desc / np.linalg.norm(desc),
                landmark_id=None,
            )
        )
    return ViewImage(id=view_id, pose=pose, intrinsics=intr, features=feats, condition=condition)
