import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adaptmorph.synthetic import bar_mesh, grid_mesh, icosphere, neutral_head

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def head():
    return neutral_head()


@pytest.fixture(scope="session")
def small_sphere():
    # 42 vertices: small enough for dense oracles
    return icosphere(1, 1.0)


@pytest.fixture(scope="session")
def bar():
    return bar_mesh()


@pytest.fixture(scope="session")
def grid():
    return grid_mesh(6)


def _write_case(directory, case, name="scan"):
    """Write a synthetic case as pipeline input files; returns a dict of paths."""
    from adaptmorph.deform import format_parts
    from adaptmorph.mesh import save_obj
    from adaptmorph.rigid import format_scan_landmarks, format_template_landmarks

    directory.mkdir(parents=True, exist_ok=True)
    paths = dict(
        template=directory / "template.obj",
        template_landmarks=directory / "template_landmarks.txt",
        parts=directory / "parts.txt",
        scan=directory / f"{name}.obj",
        scan_landmarks=directory / f"{name}_landmarks.txt",
        truth=directory / f"{name}_truth.obj",
    )
    lm = case.landmarks
    save_obj(paths["template"], case.template)
    paths["template_landmarks"].write_text(format_template_landmarks(lm.template_indices))
    paths["parts"].write_text(format_parts(case.parts))
    save_obj(paths["scan"], case.scan)
    paths["scan_landmarks"].write_text(format_scan_landmarks(lm.scan_points, lm.part_labels))
    save_obj(paths["truth"], case.template.with_vertices(case.truth))
    return {k: str(v) for k, v in paths.items()}


@pytest.fixture
def write_case():
    return _write_case
