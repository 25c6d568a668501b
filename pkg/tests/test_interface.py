import io
import json

import numpy as np
import pytest
import torch
from PIL import Image

from scenescale import trainer as tr
from scenescale.interface import main
from scenescale.scenegen import GaugeSpec, emit_bundle, generate_scene, save_bundle

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A saved scene bundle plus a small trained checkpoint."""
    root = tmp_path_factory.mktemp("iface")
    world = generate_scene(3, num_objects=2, num_frames=5, image_size=32)
    bundle = emit_bundle(world, GaugeSpec(np.array([1.0, 1.3])),
                         heldout_configs=2, heldout_views=2,
                         oracle_resolution=21, seed=3)
    save_bundle(bundle, root / "scene")
    cfg = tr.TrainConfig(rounds=1, stage1_iters=120, stage2_field_iters=8,
                         stage2_scalenet_iters=20, rays_per_batch=128,
                         label_rays_per_batch=128, label_pool_size=1024,
                         label_samples_per_ray=64, pseudo_label_combos=16,
                         samples_per_ray=32, start_resolution=16,
                         final_resolution=16, upsample_schedule=(),
                         max_rejection_attempts=4000, seed=0)
    tr.train_full(bundle, cfg, checkpoint_path=root / "ck.bin")
    return root


class TestCLI:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_unknown_flag_exits_one(self, capsys):
        assert main(["synth", "--bogus"]) == 1

    def test_missing_file_internal_error(self, tmp_path, capsys):
        assert main(["sample", "--ckpt", str(tmp_path / "nope.bin"),
                     "--count", "1", "--out", str(tmp_path / "o.json")]) == 2

    def test_synth_writes_bundle(self, tmp_path):
        out = tmp_path / "scene"
        code = main(["synth", "--seed", "3", "--objects", "2", "--frames", "4",
                     "--size", "28", "--out", str(out),
                     "--heldout-configs", "0", "--heldout-views", "0",
                     "--oracle-resolution", "9"])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["objects"] == 2
        assert (out / "frames" / "0000.png").exists()
        assert (out / "poses" / "obj01.f32").stat().st_size == 4 * 12 * 4

    def test_sample_writes_scored_combos(self, workdir, tmp_path):
        out = tmp_path / "samples.json"
        code = main(["sample", "--ckpt", str(workdir / "ck.bin"),
                     "--count", "5", "--threshold", "0.2",
                     "--seed", "1", "--out", str(out)])
        assert code == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 5
        for row in rows:
            assert row["scales"][0] == 1.0
            assert row["score"] > 0.2
            assert len(row["denorm"]) == 2

    def test_render_writes_png_and_depth(self, workdir, tmp_path):
        img_path = tmp_path / "img.png"
        depth_path = tmp_path / "depth.f32"
        code = main(["render", "--ckpt", str(workdir / "ck.bin"),
                     "--scales", "1,0.4", "--frame", "2", "--samples", "32",
                     "--out", str(img_path), "--depth-out", str(depth_path)])
        assert code == 0
        img = np.asarray(Image.open(img_path))
        assert img.shape == (32, 32, 3)
        sidecar = json.loads((tmp_path / "depth.f32.json").read_text())
        assert sidecar["width"] == 32 and sidecar["height"] == 32
        raw = np.fromfile(depth_path, dtype="<f4")
        assert raw.shape == (32 * 32,)
        assert np.isfinite(raw).all()

    def test_render_rejects_bad_scales(self, workdir, tmp_path, capsys):
        assert main(["render", "--ckpt", str(workdir / "ck.bin"),
                     "--scales", "0.5,0.4", "--out", str(tmp_path / "x.png")]) == 1
        assert main(["render", "--ckpt", str(workdir / "ck.bin"),
                     "--scales", "1,1.5", "--out", str(tmp_path / "x.png")]) == 1

    def test_oracle_command(self, workdir, tmp_path):
        out = tmp_path / "oracle.json"
        code = main(["oracle", "--scene", str(workdir / "scene"),
                     "--resolution", "11", "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert len(payload["valid"]) == 11
        assert payload["relevant_pixels"] > 0

    def test_bench_csv(self, workdir, tmp_path):
        out = tmp_path / "bench.csv"
        code = main(["bench", "--ckpt", str(workdir / "ck.bin"),
                     "--scene", str(workdir / "scene"), "--rays", "8",
                     "--sweep", "2,4", "--repeats", "1", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("h,composite_queries")

    def test_train_cli_minimal(self, workdir, tmp_path):
        cfg = {"rounds": 1, "stage1_iters": 8, "stage2_field_iters": 2,
               "stage2_scalenet_iters": 2, "rays_per_batch": 64,
               "label_rays_per_batch": 64, "label_pool_size": 256,
               "label_samples_per_ray": 32, "pseudo_label_combos": 4,
               "samples_per_ray": 16, "start_resolution": 12,
               "final_resolution": 12, "upsample_schedule": [],
               "max_rejection_attempts": 2000}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        code = main(["train", "--scene", str(workdir / "scene"),
                     "--config", str(cfg_path), "--out", str(tmp_path / "t.bin"),
                     "--report", str(tmp_path / "r.json")])
        assert code == 0
        assert (tmp_path / "t.bin").exists()
        report = json.loads((tmp_path / "r.json").read_text())
        assert len(report["rounds"]) == 1

    def test_bootstrap_cli(self, workdir, tmp_path):
        cfg = {"stage1_iters": 8, "rays_per_batch": 64, "samples_per_ray": 16,
               "start_resolution": 12, "final_resolution": 12,
               "upsample_schedule": []}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        code = main(["bootstrap", "--scene", str(workdir / "scene"),
                     "--config", str(cfg_path), "--out", str(tmp_path / "b.bin")])
        assert code == 0
        ck = tr.load_checkpoint(tmp_path / "b.bin")
        assert ck.scale_net is None
        assert len(ck.fields) == 2


@pytest.fixture(scope="module")
def client(workdir):
    from fastapi.testclient import TestClient
    from scenescale.server import make_app, make_state_from_paths
    state = make_state_from_paths(workdir / "ck.bin")
    return TestClient(make_app(state)), state


class TestHTTP:
    def test_scene_manifest(self, client):
        c, _ = client
        r = c.get("/api/scene")
        assert r.status_code == 200
        body = r.json()
        assert body["objects"] == 2
        assert body["frames"] == 5

    def test_validity_matches_library(self, client, workdir):
        c, state = client
        from scenescale.geometry import ScaleCombination
        from scenescale.scalenet import predict_validity
        r = c.post("/api/validity", json={"scales": [1.0, 0.0]})
        assert r.status_code == 200
        want = predict_validity(state.checkpoint.scale_net,
                                ScaleCombination(np.array([1.0, 0.0])))
        assert r.json()["score"] == want

    def test_validity_wrong_k(self, client):
        c, _ = client
        assert c.post("/api/validity", json={"scales": [1.0, 0.1, 0.2]}).status_code == 400

    def test_validity_out_of_range(self, client):
        c, _ = client
        assert c.post("/api/validity", json={"scales": [1.0, 1.2]}).status_code == 422
        assert c.post("/api/validity", json={"scales": [0.7, 0.5]}).status_code == 422

    def test_render_matches_cli_bytes(self, client, workdir, tmp_path):
        c, _ = client
        r = c.post("/api/render", json={"scales": [1.0, 0.4], "frame": 2,
                                        "width": 32, "height": 32})
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        main(["render", "--ckpt", str(workdir / "ck.bin"), "--scales", "1,0.4",
              "--frame", "2", "--samples", "64", "--width", "32",
              "--height", "32", "--out", str(tmp_path / "cli.png")])
        served = np.asarray(Image.open(io.BytesIO(r.content)))
        cli = np.asarray(Image.open(tmp_path / "cli.png"))
        assert np.array_equal(served, cli)

    def test_render_cache_identical_bytes(self, client):
        c, _ = client
        body = {"scales": [1.0, 0.3], "frame": 0, "width": 16, "height": 16}
        a = c.post("/api/render", json=body).content
        b = c.post("/api/render", json=body).content
        assert a == b

    def test_render_too_large(self, client):
        c, _ = client
        r = c.post("/api/render", json={"scales": [1.0, 0.3], "frame": 0,
                                        "width": 512, "height": 512})
        assert r.status_code == 413

    def test_render_bad_frame(self, client):
        c, _ = client
        r = c.post("/api/render", json={"scales": [1.0, 0.3], "frame": 99,
                                        "width": 16, "height": 16})
        assert r.status_code == 400

    def test_valid_slice_matches_scan(self, client):
        c, state = client
        from scenescale.scalenet import scan_valid_region
        r = c.get("/api/valid-slice", params={"axis_i": 1, "res": 3})
        assert r.status_code == 200
        body = r.json()
        want = scan_valid_region(state.checkpoint.scale_net, 3)
        assert np.allclose(body["scores"], want["scores"])
        assert body["axes"] == [1]

    def test_valid_slice_bad_axis(self, client):
        c, _ = client
        assert c.get("/api/valid-slice", params={"axis_i": 5}).status_code == 400

    def test_loading_guard_503(self, workdir):
        from fastapi.testclient import TestClient
        from scenescale.server import make_app, make_state_from_paths
        state = make_state_from_paths(workdir / "ck.bin")
        state.ready = False
        c = TestClient(make_app(state))
        assert c.get("/api/scene").status_code == 503
