import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_MODEL = dict(stage_channels=(8, 8, 8), c_out=8, match_hidden=(16,), vfe_channels=8, log_every=0)


@pytest.fixture(scope="session")
def tiny_ds():
    from minktrack.sim import SceneConfig, gen_dataset
    return gen_dataset(SceneConfig(n_frames=6, n_scenes=2, seed=11))


@pytest.fixture(scope="session")
def tiny_net(tiny_ds):
    from minktrack.train import TrainConfig, train
    net, _ = train(tiny_ds, TrainConfig(steps=30, lr=3e-3, **SMALL_MODEL))
    return net


@pytest.fixture(scope="session")
def tiny_ckpts(tiny_ds, tiny_net, tmp_path_factory):
    """Checkpoints for the T=3 joint model and a T=1 detector-only model."""
    from minktrack.train import TrainConfig, train
    d = tmp_path_factory.mktemp("ckpt")
    tiny_net.save(d / "t3.ckpt", extra={"lambda_track": 1.0})
    net1, _ = train(tiny_ds, TrainConfig(steps=5, n_frames=1, lambda_track=0.0, **SMALL_MODEL))
    net1.save(d / "t1.ckpt", extra={"lambda_track": 0.0})
    return [str(d / "t3.ckpt"), str(d / "t1.ckpt")]


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
