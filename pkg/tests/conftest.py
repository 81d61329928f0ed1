import numpy as np
import pytest

from patchgraph.atlas_graph import GraphBuildConfig, RegistrationConfig, build_atlas_grid
from patchgraph.volume_io import PhantomSpec, generate_phantom

DESK_SHAPE = (40, 40, 40)


def atlas_spec(**kwargs) -> PhantomSpec:
    """The clean canonical template: no lesions, no warp, no nuisance."""
    base = dict(
        shape=DESK_SHAPE,
        n_regions_affected=0,
        seed=0,
        warp_max_disp=0.0,
        rot_max_deg=0.0,
        scale_range=(1.0, 1.0),
        shift_max=0.0,
        gain_jitter=0.0,
        offset_jitter=0.0,
        noise_sigma=0.0,
    )
    base.update(kwargs)
    return PhantomSpec(**base)


@pytest.fixture(scope="session")
def atlas_record():
    return generate_phantom(atlas_spec())


@pytest.fixture(scope="session")
def atlas_volume(atlas_record):
    return atlas_record.volume


@pytest.fixture(scope="session")
def desk_grid(atlas_record):
    return build_atlas_grid(
        atlas_record.mask, patch_size=(16, 16, 16), stride=(12, 12, 12), min_mask_overlap=0.02
    )


def fast_build_config() -> GraphBuildConfig:
    """Cheaper registration for tests that don't probe registration accuracy."""
    return GraphBuildConfig(
        registration=RegistrationConfig(pyramid=(4, 2, 1), iters=(60, 30, 10))
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
