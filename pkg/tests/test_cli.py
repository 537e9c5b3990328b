import json

import pytest
from pytest import approx

from prostate_recon.cli import build_config, main, make_parser
from prostate_recon.errors import ConfigError
from prostate_recon.geometry import load_mesh, mesh_volume, polygon_area, write_obj
from prostate_recon.protocol import serialize_protocol
from prostate_recon.slicing import parse_reference_model
from prostate_recon.synthetic import generic_model, minimal_protocol, write_synthetic_case

FAST = ["--target-points", "100"]


@pytest.fixture(scope="session")
def case(tmp_path_factory):
    root = tmp_path_factory.mktemp("case")
    write_synthetic_case(root, minimal_protocol(central_count=4, offset=5.0), seed=3, rois=1)
    return root


@pytest.fixture(scope="session")
def sliced(case, tmp_path_factory):
    out = tmp_path_factory.mktemp("sliced")
    assert main(["slice", "--protocol", str(case / "protocol.json"), "--generic-dims", "40,30,35",
                 "--out", str(out)]) == 0
    return out


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# protocol


def test_protocol_validate(case, capsys):
    assert run("protocol", "validate", case / "protocol.json") == 0
    assert "valid protocol for case MIN-001" in capsys.readouterr().out


def test_protocol_duplicate_id(case, tmp_path, capsys):
    doc = json.loads((case / "protocol.json").read_text())
    doc["central"][1]["ids"][0] = doc["central"][0]["ids"][0]
    bad = tmp_path / "dup.json"
    bad.write_text(json.dumps(doc))
    assert run("protocol", "validate", bad) == 2
    assert "central[1].ids[0]" in capsys.readouterr().err


@pytest.mark.parametrize("content", [None, "{not json"])
def test_protocol_unreadable(tmp_path, content):
    path = tmp_path / "p.json"
    if content is not None:
        path.write_text(content)
    assert run("protocol", "validate", path) == 1


def test_protocol_convert(case, tmp_path):
    doc = json.loads((case / "protocol.json").read_text())
    messy = tmp_path / "messy.json"
    messy.write_text(json.dumps(doc, indent=None, sort_keys=False))
    out = tmp_path / "canon.json"
    assert run("protocol", "convert", messy, "-o", out) == 0
    assert out.read_text() == serialize_protocol(minimal_protocol(central_count=4, offset=5.0))


# ---------------------------------------------------------------------------
# slice


def test_slice_outputs(sliced, capsys):
    records = json.loads((sliced / "reference_model.json").read_text())
    assert len(records) == 12
    assert len(list((sliced / "reference_obj").glob("*.obj"))) == 12
    manifest = json.loads((sliced / "manifest_slice.json").read_text())
    assert manifest["status"] == "ok"
    assert set(manifest["outputs"]) >= {"reference_model.json"}
    assert {"numpy", "scipy", "numba", "python"} <= set(manifest["versions"])


def test_slice_prints_summary(case, tmp_path, capsys):
    assert run("slice", "--protocol", case / "protocol.json", "--generic-dims", "40,30,35",
               "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "12 reference polygons" in out
    assert "central  thickness (mm): 6.25" in out


def test_slice_needs_mesh_or_dims(case, tmp_path):
    assert run("slice", "--protocol", case / "protocol.json", "--out", tmp_path) == 2
    assert json.loads((tmp_path / "manifest_slice.json").read_text())["status"] == "failed"


def test_slice_from_mesh_file_matches_generic(case, sliced, tmp_path):
    mesh = tmp_path / "generic.obj"
    mesh.write_text(write_obj(generic_model()))
    out = tmp_path / "out"
    assert run("slice", "--protocol", case / "protocol.json", "--mesh", mesh, "--out", out) == 0
    a = parse_reference_model((out / "reference_model.json").read_text())
    b = parse_reference_model((sliced / "reference_model.json").read_text())
    assert a.names == b.names
    for pa, pb in zip(a.polygons, b.polygons):
        assert pa.area == approx(pb.area, rel=1e-6)


def test_slice_missing_mesh_file(case, tmp_path):
    assert run("slice", "--protocol", case / "protocol.json", "--mesh", tmp_path / "no.stl",
               "--out", tmp_path / "o") == 1


def test_slice_rotation_changes_geometry_not_count(case, sliced, tmp_path):
    assert run("slice", "--protocol", case / "protocol.json", "--generic-dims", "40,30,35",
               "--rotate", "0,0,90", "--out", tmp_path) == 0
    a = parse_reference_model((tmp_path / "reference_model.json").read_text())
    b = parse_reference_model((sliced / "reference_model.json").read_text())
    assert a.names == b.names
    assert any(abs(pa.area - pb.area) > 1e-3 * pb.area for pa, pb in zip(a.polygons, b.polygons))


def test_config_file_and_flag_override(case, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"protocol": str(case / "protocol.json"), "generic_dims": [40, 30, 35],
                               "apex_offset": 6.0, "out": str(tmp_path / "o"), "scale": 0.5}))
    assert run("slice", "--config", cfg, "--apex-offset", "4") == 0
    echoed = json.loads((tmp_path / "o" / "manifest_slice.json").read_text())["config"]
    assert echoed["apex_offset"] == 4.0
    assert echoed["annotation_scale"] == 0.5
    model = parse_reference_model((tmp_path / "o" / "reference_model.json").read_text())
    central = [p for p in model.polygons if p.region.kind == "central"]
    assert central[0].thickness_mm == approx((35 - 4 - 5) / 4)


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"out": str(tmp_path), "colour": "red"}))
    assert run("slice", "--config", cfg) == 2


def test_mpp_and_scale_exclusive():
    with pytest.raises(SystemExit) as exc:
        make_parser().parse_args(["register", "--mpp", "0.25", "--scale", "1"])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv, scale", [(["--mpp", "0.25"], 0.25e-3), (["--scale", "2"], 2.0),
                                         ([], 1.0)])
def test_annotation_units(argv, scale):
    cfg = build_config(make_parser().parse_args(["register", *argv]))
    assert cfg.annotation_scale == approx(scale)


def test_mesh_scale_broadcast():
    cfg = build_config(make_parser().parse_args(["slice", "--mesh-scale", "2"]))
    assert cfg.mesh_scale == (2.0, 2.0, 2.0)
    with pytest.raises(ConfigError):
        build_config(make_parser().parse_args(["slice", "--rotate", "1,2"]))


# ---------------------------------------------------------------------------
# register / reconstruct


@pytest.fixture(scope="session")
def registered(case, sliced, tmp_path_factory):
    out = tmp_path_factory.mktemp("registered")
    assert run("register", "--reference", sliced / "reference_model.json",
               "--annotations", case / "annotations", "--out", out, "--per", "annotation",
               *FAST) == 0
    return out


def test_register_outputs(registered):
    report = json.loads((registered / "registration_report.json").read_text())
    assert report["n"] == 12
    assert report["mean_iou"] >= 0.9
    # one contour plus one ROI per slide
    assert len(list((registered / "registered_obj").glob("*.obj"))) == 24


def test_register_prints_table(case, sliced, tmp_path, capsys):
    assert run("register", "--reference", sliced / "reference_model.json",
               "--annotations", case / "annotations", "--out", tmp_path, *FAST) == 0
    out = capsys.readouterr().out
    assert "mean IoU" in out and "±" in out
    assert len(list((tmp_path / "registered_obj").glob("*.obj"))) == 12


def test_register_lenient_empty_dir(sliced, tmp_path, caplog):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("register", "--reference", sliced / "reference_model.json", "--annotations", empty,
               "--lenient", "--out", tmp_path / "o") == 0
    assert "no *.geojson" in caplog.text
    assert json.loads((tmp_path / "o" / "registered.json").read_text()) == []


def test_register_strict_empty_dir(sliced, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("register", "--reference", sliced / "reference_model.json", "--annotations", empty,
               "--out", tmp_path / "o") == 2


def test_register_unknown_file_strict(case, sliced, tmp_path):
    adir = tmp_path / "ann"
    adir.mkdir()
    src = next((case / "annotations").glob("*.geojson"))
    (adir / "9Q.geojson").write_text(src.read_text())
    args = ["register", "--reference", sliced / "reference_model.json", "--annotations", adir,
            "--out", tmp_path / "o", *FAST]
    assert run(*args) == 2
    assert run(*args, "--lenient") == 0


def test_register_missing_reference(case, tmp_path):
    assert run("register", "--reference", tmp_path / "none.json",
               "--annotations", case / "annotations", "--out", tmp_path) == 1


def test_reconstruct_all_methods(registered, tmp_path):
    assert run("reconstruct", "--registered", registered / "registered.json", "--out", tmp_path) == 0
    objs = sorted(p.name for p in (tmp_path / "reconstruction").glob("*.obj"))
    assert len(objs) >= 3
    summary = json.loads((tmp_path / "reconstruction_summary.json").read_text())
    assert {m["method"] for m in summary["meshes"]} == {"ConvexHull", "GaussianSplatter",
                                                        "LinearExtrusion"}
    for m in summary["meshes"]:
        mesh = load_mesh((tmp_path / "reconstruction" / m["file"]).read_text())
        assert mesh_volume(mesh) == approx(m["volume_mm3"], rel=1e-6)


def test_reconstruct_missing_input(tmp_path):
    assert run("reconstruct", "--registered", tmp_path / "none.json", "--out", tmp_path) == 1


# ---------------------------------------------------------------------------
# mark-slides


def test_mark_slides_then_extrusion(sliced, tmp_path):
    ids = ["3L", "4R", "7L"]
    assert run("mark-slides", "--reference", sliced / "reference_model.json", "--ids", *ids,
               "--out", tmp_path) == 0
    records = json.loads((tmp_path / "registered.json").read_text())
    assert sorted({r["polygon"] for r in records}) == sorted(ids)
    assert sum(r["kind"] == "roi" for r in records) == 3
    assert run("reconstruct", "--registered", tmp_path / "registered.json", "--method",
               "extrusion", "--out", tmp_path / "r") == 0
    summary = json.loads((tmp_path / "r" / "reconstruction_summary.json").read_text())
    model = parse_reference_model((sliced / "reference_model.json").read_text())
    expected = sum(polygon_area(model[i].outline) * model[i].thickness_mm for i in ids)
    assert summary["meshes"][0]["volume_mm3"] == approx(expected, rel=1e-9)


def test_mark_slides_unknown_id(sliced, tmp_path):
    assert run("mark-slides", "--reference", sliced / "reference_model.json", "--ids", "3L",
               "9Z9", "--out", tmp_path) == 2


def test_mark_slides_empty(sliced, tmp_path):
    assert run("mark-slides", "--reference", sliced / "reference_model.json", "--ids",
               "--out", tmp_path) == 0
    assert json.loads((tmp_path / "registered.json").read_text()) == []


# ---------------------------------------------------------------------------
# pipeline


def test_pipeline_without_annotations(case, tmp_path):
    assert run("pipeline", "--protocol", case / "protocol.json", "--generic-dims", "40,30,35",
               "--out", tmp_path) == 2
    manifest = json.loads((tmp_path / "manifest_pipeline.json").read_text())
    assert manifest["status"] == "failed" and manifest["failed_stage"] == "register"
    assert "slice" in manifest["timings_s"]


def test_pipeline_mark_slides(case, tmp_path):
    assert run("pipeline", "--protocol", case / "protocol.json", "--generic-dims", "40,30,35",
               "--ids", "5L", "6R", "--method", "extrusion", "--method", "hull",
               "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "reconstruction_summary.json").read_text())
    assert [m["method"] for m in summary["meshes"]] == ["LinearExtrusion", "ConvexHull"]


def test_module_entry_point(case):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "prostate_recon", "protocol", "validate",
                           str(case / "protocol.json")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "valid protocol" in proc.stdout
