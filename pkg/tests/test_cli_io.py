import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualblind import io
from dualblind.cli import config_from_dict, main, parse_config
from dualblind.em import EmConfig, em_fit
from dualblind.errors import ConfigError
from dualblind.evaluate import derive_seeds
from dualblind.model import generate_scene, simulate


def test_defaults_for_fig2():
    cfg = config_from_dict({"command": "fig2", "seed": 1})
    assert (cfg.n, cfg.K, cfg.L, cfg.Q, cfg.max_iters) == (4, 5000, 4, 4, 100)
    assert cfg.seed == 1 and cfg.sigma2_z == 0.0


def test_defaults_for_fig3_and_fig4():
    cfg = config_from_dict({"command": "fig3"})
    assert (cfg.L, cfg.Q, cfg.sigma2_z) == (10, 10, 1e-2)
    cfg = config_from_dict({"command": "fig4"})
    assert (cfg.L, cfg.Q) == (3, 3)


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"command": "fig2", "K": 5000}))
    cfg = parse_config(["--config", str(path), "--K", "2000"])
    assert cfg.K == 2000


def test_flag_command_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"command": "fig2", "seed": 4}))
    cfg = parse_config(["fig3", "--config", str(path)])
    assert cfg.command == "fig3" and cfg.seed == 4 and cfg.L == 10


def test_unknown_command_named():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"command": "fly"})
    assert "fly" in str(info.value) and info.value.path == "command"


def test_unknown_key_named():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"command": "fig2", "bogus": 1})
    assert info.value.path == "bogus"


def test_type_mismatch_named():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"command": "fig2", "K": "many"})
    assert info.value.path == "K"


def test_missing_command():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"seed": 1})
    assert info.value.path == "command"


def test_main_reports_config_error(capsys):
    assert main(["fly"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and "fly" in err["message"]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), K=st.integers(10, 60))
def test_scene_round_trip(seed, n, K):
    model, ch = generate_scene(n, K, 1, 1, seed=seed, sigma2_er=0.01, sigma2_ec=0.02,
                               sigma2_z=0.3)
    y = simulate(model, ch, seed).y
    text = io.dumps(io.scene_to_dict(model, ch, y, seed))
    m2, c2, y2, s2 = io.scene_from_dict(json.loads(text))
    assert s2 == seed
    for a, b in ((model.A_r, m2.A_r), (model.F_c, m2.F_c), (ch.h_r, c2.h_r), (y, y2),
                 (model.c_out, m2.c_out)):
        np.testing.assert_array_equal(a, b)
    assert m2.sigma2_ec == model.sigma2_ec


def test_scene_round_trip_custom_output_row():
    model, ch = generate_scene(2, 30, 1, 1, seed=1, c_out=[1.0, 0.5, -2.0, 0.25])
    d = json.loads(io.dumps(io.scene_to_dict(model, ch, np.zeros(30), 1)))
    np.testing.assert_array_equal(io.scene_from_dict(d)[0].c_out, model.c_out)


def test_scene_rejects_unknown_field():
    model, ch = generate_scene(1, 10, 1, 1, seed=0)
    d = io.scene_to_dict(model, ch, np.zeros(10), 0)
    d["extra"] = 1
    with pytest.raises(ConfigError) as info:
        io.scene_from_dict(d)
    assert info.value.path == "extra"


def test_report_round_trip(tmp_path):
    rep = em_fit(np.random.default_rng(1).standard_normal(40), 2,
                 EmConfig(sigma2_z=0.3, max_iters=3))
    io.save_report(tmp_path / "r.json", rep)
    d = io.load_report(tmp_path / "r.json")
    assert d["loglik"] == [float(v) for v in rep.loglik]
    assert d["h_r_hat"] == rep.h_r_hat.tolist()
    assert d["iters"] == rep.iters


def test_simulate_then_fit(tmp_path):
    sim = tmp_path / "sim"
    fit = tmp_path / "fit"
    assert main(["simulate", "--out", str(sim), "--n", "2", "--K", "120", "--L", "2",
                 "--Q", "2", "--sigma2-z", "0.01", "--seed", "3"]) == 0
    _, _, y, _ = io.load_scene(sim / "scene.json")
    assert main(["fit", "--in", str(sim / "scene.json"), "--out", str(fit),
                 "--max-iters", "3"]) == 0
    report = io.load_report(fit / "report.json")
    # refit in-process on the same serialized y
    cfg = parse_config(["fit", "--in", str(sim / "scene.json"), "--max-iters", "3"])
    em_cfg = cfg.em_config(0.01, derive_seeds(0, 1)[0])
    assert report["loglik"] == [float(v) for v in em_fit(y, 2, em_cfg).loglik]
    assert (fit / "metrics.json").exists()
    manifest = json.loads((fit / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert set(manifest) >= {"config", "seeds", "versions", "wall_time_s"}


def test_fit_missing_input_file(tmp_path, capsys):
    code = main(["fit", "--in", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "error"


def test_oracle_check_command(tmp_path, capsys):
    assert main(["oracle-check", "--out", str(tmp_path), "--oracle-instances", "20"]) == 0
    assert "max deviation" in capsys.readouterr().out
    d = json.loads((tmp_path / "oracle.json").read_text())
    assert d["passed"] and d["max_deviation"] < 1e-8


def _artifacts(path):
    out = {}
    for p in sorted(path.iterdir()):
        data = p.read_bytes()
        if p.name == "manifest.json":
            d = json.loads(data)
            d.pop("wall_time_s")
            d["config"].pop("out")
            data = json.dumps(d, sort_keys=True).encode()
        out[p.name] = data
    return out


@pytest.mark.parametrize("argv", [
    ["fig2", "--K", "300", "--n", "2", "--L", "2", "--Q", "2", "--max-iters", "3"],
    ["fig4", "--grid-K", "200,300", "--grid-sigma2", "0.01,0.1", "--trials", "2",
     "--n", "2", "--L", "2", "--Q", "2", "--max-iters", "2"],
    ["simulate", "--K", "100", "--n", "3", "--L", "2", "--Q", "2", "--sigma2-z", "0.1"],
])
def test_rerun_is_byte_identical(tmp_path, argv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--seed", "7", "--out", str(a)]) == 0
    assert main(argv + ["--seed", "7", "--out", str(b)]) == 0
    assert _artifacts(a) == _artifacts(b)


def test_stem_text_format():
    text = io.stem_text(np.array([[1.0, 0.5], [2.0, -0.125]]))
    assert text == "1 0.5\n2 -0.125\n"
