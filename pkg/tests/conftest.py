from __future__ import annotations

import pytest

from mcsg.data import ShapesSpec, generate_synthetic_dataset

# PASS/FAIL lines emitted by the acceptance tests, echoed in the terminal summary
ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def shapes32():
    """Small 32 px phantom set used by the toy-model tests."""
    spec = ShapesSpec(resolution=32, slices_per_patient=8)
    return generate_synthetic_dataset(24, spec, seed=3)


def toy_gan_config(variant: str, **kw):
    from mcsg.gan.networks import GanConfig

    base = dict(
        variant=variant, resolution=32, latent_dim=32, mapping_layers=2, channel_base=256, channel_max=32,
        image_channels=0 if variant == "MSG" else 1, mask_channels=4, batch_size=8, seed=5,
    )
    base.update(kw)
    return GanConfig(**base)


@pytest.fixture(scope="session")
def toy_gans(shapes32):
    """32 px mask GAN (2k steps) and mask-conditional image GAN trained on the phantom set."""
    from mcsg.gan.training import train_gan

    msg, msg_logs = train_gan(toy_gan_config("MSG", total_steps=2000), shapes32, log_every=0)
    csg, csg_logs = train_gan(toy_gan_config("CSG", total_steps=1000), shapes32, log_every=0)
    return {"MSG": msg, "MSG_logs": msg_logs, "CSG": csg, "CSG_logs": csg_logs}


def tiny_config(out, **overrides):
    """Desk profile shrunk to seconds per grid point: 32 px, 2 slices, a handful of steps."""
    from mcsg.config import desk_profile

    values = {
        "out": str(out),
        "resolution": 32,
        "fid_dim": 8,
        "synthetic.slices_per_patient": 2,
        "gan.total_steps": 4,
        "gan.batch_size": 4,
        "gan.latent_dim": 16,
        "gan.channel_max": 16,
        "unet.base_width": 4,
        "unet.depth": 2,
        "unet.epochs": 2,
        "unet.steps_per_epoch": 1,
        "unet.batch_size": 4,
    }
    values.update(overrides)
    return desk_profile(**values)


@pytest.fixture(scope="session")
def tiny_grid(tmp_path_factory):
    """The full 26-point grid on the tiny settings, run once for the session."""
    from mcsg.experiment import run_grid

    cfg = tiny_config(tmp_path_factory.mktemp("grid"))
    return cfg, run_grid(cfg)
