import json

import numpy as np
import pytest

from match2 import synthetic
from match2.checkpoint import load_checkpoint, read_manifest, restore_optimizer, save_checkpoint
from match2.config import TrainingConfig
from match2.errors import ContractError
from match2.text import encode_batch
from match2.trainer import NegativeSampler, RAdam, Trainer, predict_proba

from conftest import tiny_model, vocab_for


@pytest.fixture(scope="module")
def trained():
    recs = synthetic.overlap_corpus(24, vocab=50)
    vocab = vocab_for(recs)
    model = tiny_model(vocab, mq=6, share_aux=False)
    tr = Trainer(model, vocab, TrainingConfig(lr=1e-3, batch_size=8, seed=2), NegativeSampler.from_records(recs))
    tr.fit(recs, epochs=2)
    return recs, vocab, model, tr


def test_round_trip_bitwise(trained, tmp_path):
    recs, vocab, model, tr = trained
    save_checkpoint(tmp_path, model, vocab, tr.cfg, tr.optimizer, extra={"epoch": 2})
    ck = load_checkpoint(tmp_path)
    assert ck.vocab == vocab and ck.training == tr.cfg and ck.manifest["extra"] == {"epoch": 2}
    for name, p in model.named_parameters().items():
        q = ck.model.named_parameters()[name]
        assert q.dtype == np.float32 and np.array_equal(p.data, q.data)
    for name, s in model.named_states().items():
        t = ck.model.named_states()[name]
        assert np.array_equal(s.running_mean, t.running_mean) and np.array_equal(s.running_var, t.running_var)
    a = predict_proba(model, vocab, recs)
    b = predict_proba(ck.model, ck.vocab, recs)
    assert a.tobytes() == b.tobytes()


def test_layout_and_blobs(trained, tmp_path):
    _, vocab, model, tr = trained
    save_checkpoint(tmp_path, model, vocab, tr.cfg, tr.optimizer)
    man = read_manifest(tmp_path)
    assert man["format_version"] == 1 and man["dtype"] == "float32" and man["byte_order"] == "little"
    assert man["config"]["model"]["share_aux"] is False
    entry = man["parameters"][0]
    raw = (tmp_path / entry["file"]).read_bytes()
    assert len(raw) == 4 * int(np.prod(entry["shape"]))
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(entry["shape"]), model.named_parameters()[entry["name"]].data)
    assert all(e["mean"].startswith("bn/") for e in man["batch_norm"])
    assert man["optimizer"]["step"] == tr.optimizer.step_count
    assert all(m["m"].startswith("optim/") for m in man["optimizer"]["moments"])


def test_optimizer_restore_continues_identically(trained, tmp_path):
    recs, vocab, model, tr = trained
    save_checkpoint(tmp_path, model, vocab, tr.cfg, tr.optimizer)
    ck = load_checkpoint(tmp_path)
    opt = RAdam.from_config(ck.model.named_parameters(), tr.cfg)
    restore_optimizer(opt, ck.optimizer)
    assert opt.step_count == tr.optimizer.step_count
    for k in opt.params:
        assert np.array_equal(opt.m[k], tr.optimizer.m[k]) and np.array_equal(opt.v[k], tr.optimizer.v[k])


def test_without_optimizer(trained, tmp_path):
    _, vocab, model, _ = trained
    save_checkpoint(tmp_path, model, vocab)
    ck = load_checkpoint(tmp_path)
    assert ck.optimizer is None and ck.training is None
    assert not (tmp_path / "optim").exists()


def test_corrupt_checkpoints(trained, tmp_path):
    _, vocab, model, _ = trained
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "nothing")
    save_checkpoint(tmp_path, model, vocab)
    man = json.loads((tmp_path / "manifest.json").read_text())
    blob = tmp_path / man["parameters"][0]["file"]
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path)
    save_checkpoint(tmp_path, model, vocab)
    man["parameters"] = man["parameters"][1:]
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path)
    man["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path)


@pytest.mark.parametrize("ablation", ["Q-only", "A-only"])
def test_ablation_round_trip(ablation, tmp_path):
    recs = synthetic.equality_corpus(6)
    vocab = vocab_for(recs)
    model = tiny_model(vocab, ablation=ablation)
    save_checkpoint(tmp_path, model, vocab)
    ck = load_checkpoint(tmp_path)
    assert ck.model.config.ablation == ablation
    b = encode_batch(recs, vocab, 5, 12)
    assert np.array_equal(model(b).y_q.data, ck.model(b).y_q.data)
