import numpy as np
import pytest

from apsnav import navigator as nv
from apsnav import nncore as nn
from apsnav import world as wd


@pytest.fixture(scope="session")
def small_world():
    return wd.generate_world(1, 30, wd.TRAIN_SEEN)


@pytest.fixture(scope="session")
def small_episodes(small_world):
    rng = np.random.default_rng(0)
    paths = wd.sample_dataset_paths(small_world, 10, rng)
    return wd.make_episodes(small_world, paths)


def train_overfit(flavor, world, episodes, iters=300, lr=3e-3, seed=1):
    """Full-batch memorization run used by the learnability smoke tests."""
    nav = nv.new_navigator(flavor, seed)
    nav.dropout = 0.0
    rng = np.random.default_rng(3)
    opt = nn.AdamState.for_params(nav.params, lr, 5e-4)
    for _ in range(iters):
        losses = []
        for pair in episodes:
            traj = nv.rollout(nav, world, pair.path.start, pair.path.end,
                              pair.instruction, nv.STUDENT_FORCING, 10, rng,
                              train=True)
            losses.append(nn.mean_scalars(traj.step_losses))
        nn.backward(nn.mean_scalars(losses), nav.params)
        nn.adam_step(nav.params, opt)
    return nav


@pytest.fixture(scope="session")
def overfit_nav(small_world, small_episodes):
    return train_overfit(nv.PANORAMIC, small_world, small_episodes)
