"""File format, configuration, persistence, and CLI tests."""

import json
from pathlib import Path

import numpy as np
import pytest

import fe2rom
from fe2rom import cli, io, meshgen, multiscale, robdb
from fe2rom.errors import ConfigError, IntegrityError

MAT = fe2rom.Material(E=207e9, nu=0.3, rho=7830.0)


class TestMeshRoundTrip:
    def test_bit_exact(self, tmp_path):
        mesh, mats = meshgen.generate_box(2, 3, 4, 0.013, 0.021, 0.037, MAT,
                                          fixed_faces=["zmin"],
                                          symmetry_faces=["zmax"])
        path = tmp_path / "mesh.json"
        io.write_mesh(path, mesh, mats)
        mesh2, mats2 = io.read_mesh(path)
        np.testing.assert_array_equal(mesh.node_coords, mesh2.node_coords)
        np.testing.assert_array_equal(mesh.elements, mesh2.elements)
        np.testing.assert_array_equal(mesh.constrained_nodes,
                                      mesh2.constrained_nodes)
        np.testing.assert_array_equal(mesh.constrained_dofs,
                                      mesh2.constrained_dofs)
        assert mats2[0].E == mats[0].E and mats2[0].rho == mats[0].rho

    def test_invalid_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"nodes\": []}")
        with pytest.raises(ConfigError):
            io.read_mesh(path)


class TestRomxFormat:
    def test_round_trip_bit_patterns(self, tmp_path):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((17, 5))
        A[0, 0] = -0.0
        A[1, 1] = np.pi
        path = tmp_path / "m.romx"
        io.write_romx(path, A)
        B = io.read_romx(path)
        np.testing.assert_array_equal(A, B)
        assert A.tobytes() == B.tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.romx"
        io.write_romx(path, np.zeros((3, 2)))
        raw = path.read_bytes()
        assert raw[:4] == b"ROMX"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:16], "little") == 3
        assert int.from_bytes(raw[16:24], "little") == 2
        assert len(raw) == 24 + 8 * 6

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "m.romx"
        io.write_romx(path, np.ones((4, 4)))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(IntegrityError):
            io.read_romx(path)


class TestConfigValidation:
    def base(self):
        return {
            "mode": "hprom",
            "dt": 1e-7,
            "tf": 1e-5,
            "loading": {"type": "pressure", "face": "ymax",
                        "direction": [0, -1, 0], "magnitude": 1e8},
        }

    def test_defaults_applied(self):
        cfg = io.validate_config(self.base())
        assert cfg["r_tol"] == 1e-3
        assert cfg["c_max"] == 20
        assert cfg["epsilon"] == 1e-3
        assert cfg["ds"] == cfg["dt"]
        assert cfg["threads"] == 1

    def test_unknown_key_rejected(self):
        raw = self.base()
        raw["rtol"] = 1e-3
        with pytest.raises(ConfigError, match="rtol"):
            io.validate_config(raw)

    def test_unknown_loading_key_rejected(self):
        raw = self.base()
        raw["loading"]["ramp"] = True
        with pytest.raises(ConfigError):
            io.validate_config(raw)

    def test_ds_must_divide(self):
        raw = self.base()
        raw["ds"] = 2.5e-7
        with pytest.raises(ConfigError):
            io.validate_config(raw)

    def test_cgs_units_converted(self):
        raw = self.base()
        raw["units"] = "cgs"
        raw["loading"]["magnitude"] = 1e9  # dyn/cm^2
        cfg = io.validate_config(raw)
        assert cfg["loading"]["magnitude"] == pytest.approx(1e8)
        assert cfg["units"] == "si"

    def test_every_spec_tunable_is_settable(self):
        raw = self.base()
        raw.update({"r_tol": 5e-4, "c_max": 11, "epsilon": 2e-4,
                    "energy_tol": 1e-9, "m_init": 33, "ds": 2e-7,
                    "adaptive": False, "n_train": 7, "threads": 1})
        cfg = io.validate_config(raw)
        for key in ("r_tol", "c_max", "epsilon", "energy_tol", "m_init",
                    "ds", "adaptive", "n_train"):
            assert cfg[key] == raw[key]


class TestDatabasePersistence:
    @pytest.fixture(scope="class")
    def db(self):
        mesh, mats = meshgen.generate_rve_void(3, 1,
                                               fe2rom.Material(E=207e9, nu=0.3))
        rng = np.random.default_rng(1)
        bvps = [fe2rom.MicroBvp(mesh=mesh, materials=mats,
                                F=np.eye(3) + 2e-3 * rng.standard_normal((3, 3)))
                for _ in range(6)]
        db, _ = fe2rom.initialize_db(mesh, mats, bvps)
        # force one enrichment so lineage data is nontrivial
        F = np.diag([1.15, 1.0, 0.98])
        fe2rom.query_with_update(db, fe2rom.MicroBvp(mesh=mesh, materials=mats,
                                                     F=F))
        return db

    def test_round_trip(self, db, tmp_path):
        root = tmp_path / "db"
        io.save_database(db, root)
        db2 = io.load_database(root)
        assert len(db2.entries) == len(db.entries)
        for a, b in zip(db.entries, db2.entries):
            np.testing.assert_array_equal(a.N_z, b.N_z)
            np.testing.assert_array_equal(a.N_u, b.N_u)
            np.testing.assert_array_equal(a.rob.V, b.rob.V)
        assert db2.total_samples == db.total_samples
        np.testing.assert_array_equal(db2.reduced_mesh.element_ids,
                                      db.reduced_mesh.element_ids)

    def test_layout(self, db, tmp_path):
        root = tmp_path / "db"
        io.save_database(db, root)
        first = db.entries[0].id
        for name in ("rob.romx", "params.romx", "snapshots.romx", "meta.json"):
            assert (root / f"entry_{first}" / name).exists()
        assert (root / "reduced_mesh.json").exists()
        rm = json.loads((root / "reduced_mesh.json").read_text())
        assert set(rm) == {"elements", "weights", "epsilon", "trained_on"}

    def test_tampered_snapshot_detected(self, db, tmp_path):
        root = tmp_path / "db"
        io.save_database(db, root)
        target = root / f"entry_{db.entries[0].id}" / "snapshots.romx"
        raw = bytearray(target.read_bytes())
        raw[40] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="snapshots"):
            io.load_database(root)

    def test_inspect_report(self, db, tmp_path):
        root = tmp_path / "db"
        io.save_database(db, root)
        report = io.inspect_database(root)
        assert report["sample_conservation"]
        assert report["capacity_ok"]
        roots = [r for r in report["entries"] if r["lineage"] == "root"]
        children = [r for r in report["entries"] if r["lineage"] != "root"]
        assert len(roots) + len(children) == len(db.entries)


@pytest.mark.slow
class TestCliEndToEnd:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli")
        macro_spec = {"kind": "box", "nx": 2, "ny": 2, "nz": 4,
                      "lx": 0.01, "ly": 0.01, "lz": 0.05,
                      "fixed_faces": ["zmin"], "symmetry_faces": ["zmax"],
                      "material": {"E": 207e9, "nu": 0.3, "rho": 7830.0}}
        rve_spec = {"kind": "rve-void", "n": 3, "void": 1,
                    "material": {"E": 207e9, "nu": 0.3}}
        (root / "macro_spec.json").write_text(json.dumps(macro_spec))
        (root / "rve_spec.json").write_text(json.dumps(rve_spec))
        assert cli.main(["generate-mesh", "--config",
                         str(root / "macro_spec.json"),
                         "--out", str(root / "macro.json")]) == 0
        assert cli.main(["generate-mesh", "--config",
                         str(root / "rve_spec.json"),
                         "--out", str(root / "rve.json")]) == 0
        dt = 5e-8
        cfg = {
            "mode": "hprom", "adaptive": True,
            "macro_mesh": str(root / "macro.json"),
            "rve_mesh": str(root / "rve.json"),
            "dt": dt, "tf": dt * 20, "ds": dt * 4, "m_init": 6,
            "energy_tol": 1e-10, "epsilon": 1e-4,
            "loading": {"type": "pressure", "face": "ymax",
                        "direction": [0, -1, 0], "magnitude": 1e9,
                        "profile": "linear_ramp"},
        }
        (root / "run.json").write_text(json.dumps(cfg))
        hdm_cfg = dict(cfg, mode="hdm")
        (root / "run_hdm.json").write_text(json.dumps(hdm_cfg))
        return root

    def test_run_and_outputs(self, workspace):
        out = workspace / "out_hdm"
        assert cli.main(["run", "--config", str(workspace / "run_hdm.json"),
                         "--out", str(out)]) == 0
        assert (out / "manifest.json").exists()
        assert (out / "history.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "hdm"
        assert summary["counters"]["micro_queries"] > 0

    def test_adaptive_run_writes_database(self, workspace):
        out = workspace / "out_hprom"
        assert cli.main(["run", "--config", str(workspace / "run.json"),
                         "--out", str(out)]) == 0
        assert (out / "db" / "meta.json").exists()
        assert cli.main(["db-inspect", str(out / "db")]) == 0

    def test_compare_self_is_zero(self, workspace, capsys):
        out = workspace / "out_hdm"
        assert cli.main(["compare", str(out / "history.csv"),
                         str(out / "history.csv")]) == 0
        text = capsys.readouterr().out
        assert "y-displacement" in text and "z-velocity" in text

    def test_compare_scaled_copy(self, workspace, tmp_path):
        out = workspace / "out_hdm"
        hist = io.read_history_csv(out / "history.csv")
        scaled = multiscale.TimeHistory(times=hist.times.copy(),
                                        disp=1.01 * hist.disp,
                                        vel=1.01 * hist.vel)
        other = tmp_path / "scaled.csv"
        io.write_history_csv(other, scaled)
        ref = io.read_history_csv(out / "history.csv")
        rep = multiscale.error_report(ref, io.read_history_csv(other),
                                      float(ref.times[1] - ref.times[0]))
        for key, val in rep.items():
            if val is not None:
                assert val == pytest.approx(1.0, rel=1e-6)

    def test_rerun_is_bit_identical(self, workspace):
        out1 = workspace / "det1"
        out2 = workspace / "det2"
        for out in (out1, out2):
            assert cli.main(["run", "--config", str(workspace / "run.json"),
                             "--out", str(out)]) == 0
        assert (out1 / "history.csv").read_bytes() == \
            (out2 / "history.csv").read_bytes()

    def test_validation_exit_code(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"mode": "warp", "dt": 1e-7, "tf": 1e-6,
                                   "loading": {"type": "pressure",
                                               "face": "ymax",
                                               "direction": [0, -1, 0],
                                               "magnitude": 1.0}}))
        assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_VALIDATION

    def test_integrity_exit_code(self, workspace):
        out = workspace / "out_hprom"
        target = next((out / "db").glob("entry_*/snapshots.romx"))
        raw = bytearray(target.read_bytes())
        raw[30] ^= 0x01
        target.write_bytes(bytes(raw))
        assert cli.main(["db-inspect", str(out / "db")]) == cli.EXIT_INTEGRITY


class TestMeshGenerators:
    def test_unit_cube_counts(self):
        mesh, _ = meshgen.generate_box(1, 1, 1, 1.0, 1.0, 1.0, MAT)
        assert mesh.n_nodes == 8 and mesh.n_elements == 1

    def test_void_cell_element_count(self):
        mesh, _ = meshgen.generate_rve_void(5, 3,
                                            fe2rom.Material(E=1e9, nu=0.3))
        assert mesh.n_elements == 125 - 27

    def test_fiber_volume_fraction(self):
        fiber = fe2rom.Material(E=2.1252e11, nu=0.4)
        matrix = fe2rom.Material(E=7.252e10, nu=0.4)
        mesh, mats = meshgen.generate_rve_fiber(9, 3, fiber, matrix)
        frac = np.count_nonzero(mesh.material_id == 1) / mesh.n_elements
        assert frac == pytest.approx(1.0 / 9.0)
        assert mats[1].E == fiber.E

    def test_impossible_void_rejected(self):
        with pytest.raises(ConfigError):
            meshgen.generate_rve_void(3, 5, fe2rom.Material(E=1e9, nu=0.3))

    def test_manifest_written_before_run(self, tmp_path):
        cfg = io.validate_config({
            "mode": "hdm", "dt": 1e-7, "tf": 1e-6,
            "loading": {"type": "pressure", "face": "ymax",
                        "direction": [0, -1, 0], "magnitude": 1.0}})
        manifest = io.write_manifest(tmp_path, cfg, {"config": "x.json"})
        stored = json.loads((tmp_path / "manifest.json").read_text())
        assert stored["config_hash"] == manifest["config_hash"]
        assert stored["tool_version"] == io.TOOL_VERSION
