"""Array-per-entry checkpoint directories and optimizer state round-trips."""

import json

import pytest
import torch

from dsfwsi.checkpointing import (
    FORMAT_VERSION,
    load_checkpoint,
    load_module_arrays,
    read_metadata,
    save_checkpoint,
    save_module_arrays,
)
from dsfwsi.errors import CheckpointError


def _model(seed=0):
    torch.manual_seed(seed)
    return torch.nn.Sequential(
        torch.nn.Linear(4, 8),
        torch.nn.BatchNorm1d(8),
        torch.nn.Linear(8, 2),
    )


class TestModuleArrays:
    def test_round_trip_bitwise(self, tmp_path):
        src = _model(0)
        # push the BN buffers away from their init values
        src.train()
        for _ in range(3):
            src(torch.randn(4, 4))
        save_module_arrays(src, tmp_path / "m")
        dst = _model(1)
        load_module_arrays(dst, tmp_path / "m", where="test")
        for (ka, va), (kb, vb) in zip(src.state_dict().items(), dst.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb), ka

    def test_buffers_included(self, tmp_path):
        src = _model(0)
        save_module_arrays(src, tmp_path / "m")
        names = {p.name for p in (tmp_path / "m").glob("*.npy")}
        assert any("running_mean" in n for n in names)
        assert any("num_batches_tracked" in n for n in names)

    def test_missing_array_named(self, tmp_path):
        src = _model(0)
        save_module_arrays(src, tmp_path / "m")
        victim = next((tmp_path / "m").glob("*weight*.npy"))
        victim.unlink()
        with pytest.raises(CheckpointError, match=victim.stem.split(".")[0]):
            load_module_arrays(_model(1), tmp_path / "m", where="test")

    def test_unexpected_array_named(self, tmp_path):
        src = _model(0)
        save_module_arrays(src, tmp_path / "m")
        import numpy as np
        np.save(tmp_path / "m" / "stowaway.npy", np.zeros(3))
        with pytest.raises(CheckpointError, match="stowaway"):
            load_module_arrays(_model(1), tmp_path / "m", where="test")

    def test_shape_mismatch_named(self, tmp_path):
        src = _model(0)
        save_module_arrays(src, tmp_path / "m")
        wrong = torch.nn.Sequential(
            torch.nn.Linear(4, 8),
            torch.nn.BatchNorm1d(8),
            torch.nn.Linear(8, 3),  # head widened
        )
        with pytest.raises(CheckpointError, match="shape"):
            load_module_arrays(wrong, tmp_path / "m", where="test")

    def test_missing_dir_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_module_arrays(_model(0), tmp_path / "absent", where="test")


class TestFullCheckpoint:
    def _train_some(self, model, opt, steps=3):
        for _ in range(steps):
            opt.zero_grad()
            model(torch.randn(4, 4)).sum().backward()
            opt.step()

    def test_checkpoint_round_trip_with_adam(self, tmp_path):
        model = _model(0)
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        self._train_some(model, opt)
        save_checkpoint(tmp_path / "ck", {"net": model}, {"kind": "unit"}, optimizer=opt)

        model2 = _model(1)
        opt2 = torch.optim.Adam(model2.parameters(), lr=1e-2)
        meta = load_checkpoint(tmp_path / "ck", {"net": model2}, optimizer=opt2)
        assert meta["kind"] == "unit"

        # same params, same optimizer moments -> identical next step
        torch.manual_seed(7)
        batch = torch.randn(4, 4)
        for m, o in ((model, opt), (model2, opt2)):
            o.zero_grad()
            m(batch).sum().backward()
            o.step()
        for pa, pb in zip(model.parameters(), model2.parameters()):
            assert torch.equal(pa, pb)

    def test_metadata_gate(self, tmp_path):
        model = _model(0)
        save_checkpoint(tmp_path / "ck", {"net": model}, {"kind": "unit"})
        meta_path = tmp_path / "ck" / "metadata.json"
        data = json.loads(meta_path.read_text())
        assert data["format_version"] == FORMAT_VERSION
        data["format_version"] = FORMAT_VERSION + 10
        meta_path.write_text(json.dumps(data))
        with pytest.raises(CheckpointError, match="format_version"):
            read_metadata(tmp_path / "ck")

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            read_metadata(tmp_path)

    def test_atomic_overwrite(self, tmp_path):
        model = _model(0)
        save_checkpoint(tmp_path / "ck", {"net": model}, {"round": 1})
        save_checkpoint(tmp_path / "ck", {"net": model}, {"round": 2})
        assert read_metadata(tmp_path / "ck")["round"] == 2
        assert not (tmp_path / "ck.tmp").exists()
