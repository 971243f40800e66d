import csv
import json

import numpy as np
import pytest

from lsdeconv.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    TABLE_COLUMNS,
    ConfigError,
    main,
    parse_config,
)
from lsdeconv.optics import OpticalConfig, bead_model, sphere_indicator
from lsdeconv.volume import Volume, load_volume, save_volume

OPTICS = {"dims": [12, 12, 8]}
FAST = {"max_iters": 200, "gap_tol": 1e-6}


def write_config(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def run(tmp_path, command, obj, out):
    cfg = write_config(tmp_path, obj, f"{out}.json")
    return main([command, "--config", cfg, "--out", str(tmp_path / out)])


def test_parse_config_defaults_and_rejections():
    cfg = parse_config({})
    assert cfg.variant == "LS-IC" and cfg.optics.n == 1.35
    assert parse_config({"zernike": "table"}).coeffs().c[0] == -0.7763
    for bad in ({"alpah": 1}, {"solver": {"alpah": 1}}, {"variant": "LS-XX"},
                {"boundary": "reflect"}, {"psf_h": "a"}, {"alphas": []},
                {"zernike": [0.0] * 14}, {"tune": {"mode": "both"}}):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_psf_command_writes_normalised_h(tmp_path, capsys):
    assert run(tmp_path, "psf", {"optics": OPTICS, "zernike": "table"}, "psf") == EXIT_OK
    h = load_volume(tmp_path / "psf" / "h")
    assert h.data.sum() == pytest.approx(1.0, abs=1e-5)
    assert (tmp_path / "psf" / "l_mip_z.png").exists()
    saved = json.loads((tmp_path / "psf" / "config.json").read_text())
    assert saved["optics"]["dims"] == [12, 12, 8]
    assert json.loads(capsys.readouterr().out)["command"] == "psf"


def test_psf_fit_improves_on_init(tmp_path):
    cfg = OpticalConfig(dims=(12, 12, 6), step_z=0.5)
    c = np.zeros(15)
    c[2] = 0.2
    bead = bead_model(cfg, c, 0.6, sphere_indicator(cfg.dims, cfg.pitch, 0.4))
    save_volume(Volume(100 * bead + 5), tmp_path / "bead")
    obj = {"optics": {"dims": [12, 12, 6], "step_z": 0.5},
           "bead": {"path": str(tmp_path / "bead"), "radius_um": 0.4, "max_evals": 300,
                    "restarts": 0}}
    assert run(tmp_path, "psf", obj, "fit") == EXIT_OK
    fit = json.loads((tmp_path / "fit" / "psf_fit.json").read_text())
    assert fit["residual"] < fit["init_residual"]


def test_simulate_is_reproducible(tmp_path):
    obj = {"optics": OPTICS, "phantom": {"kind": "beads", "grid": [2, 2, 1]},
           "noise": {"seed": 5}}
    assert run(tmp_path, "simulate", obj, "a") == EXIT_OK
    assert run(tmp_path, "simulate", obj, "b") == EXIT_OK
    for name in ("f.raw", "u0.raw", "f_clean.raw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    f = load_volume(tmp_path / "a" / "f").data
    assert abs(f.max() - 2000) < 6 * np.sqrt(2100)
    obj["noise"]["seed"] = 6
    assert run(tmp_path, "simulate", obj, "c") == EXIT_OK
    assert (tmp_path / "a" / "f.raw").read_bytes() != (tmp_path / "c" / "f.raw").read_bytes()


def test_deconvolve_runs_and_is_deterministic(tmp_path):
    assert run(tmp_path, "simulate", {"optics": OPTICS}, "sim") == EXIT_OK
    for variant in ("LS-IC", "PSF-L2"):
        obj = {"optics": OPTICS, "input": str(tmp_path / "sim" / "f"), "variant": variant,
               "solver": {**FAST, "alpha": 0.1}}
        outs = [f"{variant}-1", f"{variant}-2"]
        for o in outs:
            assert run(tmp_path, "deconvolve", obj, o) == EXIT_OK
        h1, h2 = ((tmp_path / o / "gap_history.json").read_text() for o in outs)
        assert h1 == h2
        res = json.loads((tmp_path / outs[0] / "result.json").read_text())
        assert res["variant"] == variant
        assert (tmp_path / outs[0] / "v.raw").exists() == (variant == "LS-IC")


def test_deconvolve_error_paths(tmp_path):
    missing = {"optics": OPTICS, "input": str(tmp_path / "nope"),
               "psf_h": str(tmp_path / "h"), "psf_l": str(tmp_path / "l")}
    assert run(tmp_path, "deconvolve", missing, "err1") == EXIT_IO
    assert run(tmp_path, "deconvolve", {"optics": OPTICS}, "err2") == EXIT_CONFIG
    assert run(tmp_path, "psf", {"optics": OPTICS, "bogus": 1}, "err3") == EXIT_CONFIG
    assert main(["psf", "--config", str(tmp_path / "absent.json")]) == EXIT_IO


def test_compare_table(tmp_path):
    obj = {"optics": OPTICS, "variants": ["LS-IC", "PSF-L2"], "alphas": [0.3, 0.1, 0.03],
           "solver": FAST}
    assert run(tmp_path, "compare", obj, "cmp") == EXIT_OK
    with open(tmp_path / "cmp" / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert tuple(rows[0]) == TABLE_COLUMNS
    assert {r["variant"] for r in rows} == {"LS-IC", "PSF-L2"}


def test_compare_discrepancy_marks_selected(tmp_path):
    obj = {"optics": OPTICS, "variants": ["LS-IC"], "solver": FAST,
           "tune": {"alpha_min": 0.01, "alpha_max": 1.0, "per_decade": 1}}
    assert run(tmp_path, "compare", obj, "disc") == EXIT_OK
    rows = json.loads((tmp_path / "disc" / "results.json").read_text())["rows"]
    assert len(rows) == 3
    assert sum(r["selected"] for r in rows) <= 1


def test_tune_writes_sweep(tmp_path):
    obj = {"optics": OPTICS, "solver": FAST,
           "tune": {"alpha_min": 0.01, "alpha_max": 1.0, "per_decade": 1, "full_sweep": True}}
    assert run(tmp_path, "tune", obj, "tune") == EXIT_OK
    rep = json.loads((tmp_path / "tune" / "sweep.json").read_text())
    assert len(rep["sweep"]) == 3
    assert "metrics" in rep["sweep"][0]
    assert rep["bounds"]["gamma"] == 12 * 12 * 8 / 2
    assert (tmp_path / "tune" / "u.raw").exists()
