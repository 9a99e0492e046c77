import json
import subprocess
import sys

import pytest

from rpkit import codec
from rpkit.cli import main


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data, vae, ar = d / "data", d / "vae.ckpt", d / "ar.ckpt"
    assert main(["synth", "--out", str(data), "--pages", "3", "--max-elements", "40", "--seed", "1"]) == 0
    assert main(["train-vae", "--data", str(data), "--out", str(vae), "--steps", "3", "--batch", "8"]) == 0
    assert main(["train-ar", "--data", str(data), "--vae", str(vae), "--out", str(ar),
                 "--steps", "2", "--batch", "2"]) == 0
    return d


def test_generate_json_and_css_agree(trained, tmp_path):
    html = sorted((trained / "data").glob("*.html"))[0]
    out, css = tmp_path / "rps.json", tmp_path / "page.css"
    argv = ["generate", "--model", "ar", "--html", str(html), "--out", str(out), "--css", str(css),
            "--seed", "7", "--ckpt", str(trained / "ar.ckpt")]
    assert main(argv) == 0
    rps = codec.from_json(out.read_text())
    back = codec.parse_css_rules(css.read_text())
    assert sorted(back) == sorted(rps)
    assert all((back[k] == rps[k]).all() for k in rps)
    first = out.read_bytes()
    assert main(argv) == 0
    assert out.read_bytes() == first


def test_generate_wrong_model_kind(trained, tmp_path, capsys):
    html = sorted((trained / "data").glob("*.html"))[0]
    rc = main(["generate", "--model", "dm", "--html", str(html), "--out", str(tmp_path / "x.json"),
               "--ckpt", str(trained / "ar.ckpt")])
    assert rc == 1
    assert "CheckpointError" in capsys.readouterr().err


def test_eval_identical_dirs(trained, tmp_path):
    report = tmp_path / "r.json"
    data = str(trained / "data")
    assert main(["eval", "--real", data, "--gen", data, "--out", str(report)]) == 0
    r = json.loads(report.read_text())
    assert r["ele_iou"] == 1.0 and r["sc_score"] == 1.0


def test_eval_unknown_metric(trained):
    data = str(trained / "data")
    assert main(["eval", "--real", data, "--gen", data, "--metrics", "bleu"]) == 1


def test_unknown_flag_prints_usage():
    p = subprocess.run([sys.executable, "-m", "rpkit.cli", "synth", "--out", "x", "--frobnicate"],
                       capture_output=True, text=True)
    assert p.returncode != 0
    assert "usage:" in p.stderr


def test_vc_command(trained, capsys):
    html = sorted((trained / "data").glob("*.html"))[0]
    rps = html.with_name(html.stem + ".rps.json")
    assert main(["vc", "--html", str(html), "--rps", str(rps)]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["vc_total"] > 0.1


def test_render_css(trained, tmp_path):
    rps = sorted((trained / "data").glob("*.rps.json"))[0]
    css = tmp_path / "a.css"
    assert main(["render-css", "--rps", str(rps), "--out", str(css)]) == 0
    assert codec.parse_css_rules(css.read_text()).keys() == codec.from_json(rps.read_text()).keys()
