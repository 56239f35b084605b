from __future__ import annotations

import pytest

from mcsg.config import (
    GENERATED_COUNTS,
    ExperimentConfig,
    apply_overrides,
    derive_seed,
    desk_profile,
    dump_config,
    grid_labels,
    grid_points,
    load_config,
    method_label,
    paper_profile,
    parse_config_text,
)


def test_grid_has_26_points_in_block_order():
    labels = grid_labels()
    assert len(labels) == len(set(labels)) == 26
    assert labels[0] == "BL + w.o." and labels[13] == "BL + w."
    assert labels[1:7] == [f"B-SG + w.o. + {c}" for c in GENERATED_COUNTS]
    assert labels[7:13] == [f"MC-SG + w.o. + {c}" for c in GENERATED_COUNTS]
    assert labels[-1] == "MC-SG + w. + 500"
    assert sum(1 for m, _, _ in grid_points() if m == "BL") == 2


def test_method_labels():
    assert method_label("BL", False, 0) == "BL + w.o."
    assert method_label("BSG", True, 20) == "B-SG + w. + 20"
    assert method_label("MCSG", False, 500) == "MC-SG + w.o. + 500"


def test_validation():
    with pytest.raises(ValueError, match="BL"):
        ExperimentConfig(method="BL", generated_count=20)
    with pytest.raises(ValueError):
        ExperimentConfig(method="BSG", generated_count=0)
    with pytest.raises(ValueError):
        ExperimentConfig(method="MCSG", generated_count=30)
    with pytest.raises(ValueError):
        ExperimentConfig(method="XSG")
    with pytest.raises(ValueError):
        ExperimentConfig(profile="laptop")


def test_case_id():
    assert ExperimentConfig().case_id == "SYNTHETIC-20"
    assert ExperimentConfig(dataset_name="brats", patients=41).case_id == "BRATS-41"


def test_hash_ignores_output_dir_and_tracks_settings():
    a = desk_profile(out="x")
    assert a.config_hash() == desk_profile(out="y").config_hash()
    assert a.config_hash() != desk_profile(seed=1).config_hash()
    assert a.config_hash() != a.with_method("BL", True, 0).config_hash()
    b = a.with_method("BSG", False, 20)
    assert b.config_hash() != apply_overrides(b, {"gan.total_steps": 5}).config_hash()


def test_baseline_hash_ignores_gan_settings():
    a = desk_profile()
    assert a.config_hash() == apply_overrides(a, {"gan.total_steps": 5, "truncation_psi": 0.7}).config_hash()


def test_override_only_changes_its_label():
    a = desk_profile()
    b = desk_profile(unet_overrides={"BL + w.o.": {"lr": 0.0}})
    assert a.config_hash() != b.config_hash()
    assert a.with_method("BL", True, 0).config_hash() == b.with_method("BL", True, 0).config_hash()


def test_derive_seed_is_stable_and_stage_specific():
    assert derive_seed(0, "unet") == derive_seed(0, "unet")
    assert len({derive_seed(0, s) for s in ("data", "split", "unet", "fid")}) == 4
    assert derive_seed(0, "data") != derive_seed(1, "data")
    assert 0 <= derive_seed(123, "x") < 2**31


def test_profiles():
    desk, paper = desk_profile(), paper_profile("heart")
    assert desk.resolution == desk.gan.resolution == 64
    assert paper.resolution == paper.gan.resolution == 256
    assert paper.unet.lr == 1e-4 and paper.unet.batch_size == 64 and paper.unet.epochs == 150
    assert paper.gan.latent_dim == 512 and paper.gan.mapping_layers == 8
    assert paper_profile("brats").unet.epochs == 70


def test_parse_config_text():
    text = """
    # comment
    seed = 3
    augmentation = yes   # trailing comment
    slices_per_generated_patient = none
    gan.lr_g = 1e-3
    dataset = data/brats
    """
    values = parse_config_text(text)
    assert values == {
        "seed": 3, "augmentation": True, "slices_per_generated_patient": None, "gan.lr_g": 1e-3,
        "dataset": "data/brats",
    }
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("seed 3")


def test_overrides_and_errors():
    cfg = apply_overrides(desk_profile(), {"resolution": 32, "unet.epochs": 3, "synthetic.patients": 30})
    assert cfg.resolution == cfg.gan.resolution == 32
    assert cfg.unet.epochs == 3 and cfg.synthetic.patients == 30
    with pytest.raises(KeyError):
        apply_overrides(cfg, {"bogus": 1})
    with pytest.raises(KeyError):
        apply_overrides(cfg, {"model.width": 1})


def test_load_and_dump_roundtrip(tmp_path):
    cfg = desk_profile(seed=7, augmentation=True, **{"unet.epochs": 5})
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back.config_hash() == cfg.config_hash()
    assert load_config(path, seed=8).seed == 8
    paper = tmp_path / "p.cfg"
    paper.write_text("profile = paper\ndataset_name = kits\n")
    assert load_config(paper).unet.base_width == 32
