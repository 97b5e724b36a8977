import struct

import numpy as np
import pytest

from pseg.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from pseg.cli import main
from pseg.config import TrainConfig, apply_overrides, parse_kv, to_lines
from pseg.errors import ChecksumError, ConfigError, FreezeViolation, LengthError, ParseError, ProvenanceError
from pseg.metrics import read_report
from pseg.pipeline import ModelBundle, Split, check_zero_shot, finetune_decoder
from pseg.pnm import encode_ppm
from pseg.synthdata import domain_spec, render, stack

from conftest import toy_model_config

# -- checkpoint format ----------------------------------------------------------------------


def _params():
    rng = np.random.default_rng(0)
    return [("a.weight", rng.normal(size=(3, 2))), ("b", np.array(2.5)), ("c.bias", np.zeros(4))]


def test_checkpoint_layout():
    data = encode_checkpoint([("w", np.array([[1.0, 2.0]]))])
    body = MAGIC + struct.pack("<Q", 1) + b"w" + struct.pack("<QQQ", 2, 1, 2) + struct.pack("<2d", 1, 2)
    assert data[:-8] == body
    # FNV-1a 64 reference implementation
    h = 0xCBF29CE484222325
    for byte in body:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    assert struct.unpack("<Q", data[-8:])[0] == h


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "a.pseg", _params())
    state = load_checkpoint(tmp_path / "a.pseg")
    save_checkpoint(tmp_path / "b.pseg", list(state.items()))
    assert (tmp_path / "a.pseg").read_bytes() == (tmp_path / "b.pseg").read_bytes()
    for name, arr in _params():
        assert state[name].tobytes() == arr.tobytes() and state[name].shape == arr.shape


def test_checksum_mismatch():
    data = bytearray(encode_checkpoint(_params()))
    data[20] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(data))


def test_truncated_and_bad_magic():
    data = encode_checkpoint(_params())
    with pytest.raises(LengthError):
        decode_checkpoint(data[:3])
    with pytest.raises((LengthError, ChecksumError)):
        decode_checkpoint(data[:-20])
    with pytest.raises(ParseError):
        decode_checkpoint(b"XSEG1" + data[5:])


def test_inventory_checks():
    data = encode_checkpoint(_params())
    inv = {n: a.shape for n, a in _params()}
    assert set(decode_checkpoint(data, expected=inv)) == set(inv)
    with pytest.raises(ParseError, match="a.weight"):
        decode_checkpoint(data, expected={**inv, "a.weight": (2, 3)})
    with pytest.raises(ParseError, match="c.bias"):
        decode_checkpoint(data, expected={k: v for k, v in inv.items() if k != "c.bias"})
    with pytest.raises(ParseError, match="missing"):
        decode_checkpoint(data, expected={**inv, "d": (1,)})


def test_bundle_round_trip(tmp_path, toy_bundle):
    toy_bundle.record(stage="pretrain", seed="3", train_domains="A")
    toy_bundle.save(tmp_path / "b1")
    back = ModelBundle.load(tmp_path / "b1")
    back.save(tmp_path / "b2")
    for name in ("bundle.cfg", "base.pseg"):
        assert (tmp_path / "b1" / name).read_bytes() == (tmp_path / "b2" / name).read_bytes()
    assert back.provenance == toy_bundle.provenance
    assert back.trained_domains() == {"A"}


# -- config -----------------------------------------------------------------------------------


def test_config_parsing_and_stage_defaults():
    vals = parse_kv("lr = 0.01  # faster\n\nepochs=3\n")
    cfg = apply_overrides(TrainConfig.for_stage("pretrain"), vals)
    assert cfg.lr == 0.01 and cfg.epochs == 3 and cfg.batch_size == 8
    ft = TrainConfig.for_stage("finetune")
    assert (ft.epochs, ft.batch_size, ft.lr, ft.freeze_encoder, ft.freeze_prompt_encoder) == \
        (20, 32, 1e-4, True, True)
    assert (TrainConfig.for_stage("detector").epochs, TrainConfig.for_stage("detector").lr) == (100, 1e-4)
    assert TrainConfig.for_stage("pretrain").lr == 1e-3
    assert TrainConfig.for_stage("segmenter").batch_size == 8
    again = apply_overrides(TrainConfig.for_stage("pretrain"), parse_kv("\n".join(to_lines(cfg))))
    assert again == cfg
    with pytest.raises(ParseError):
        parse_kv("no equals sign")
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig.for_stage("pretrain"), {"epochs": "many"})
    with pytest.raises(ConfigError):
        TrainConfig.for_stage("finetune", freeze_encoder=False).validate()
    with pytest.raises(ConfigError):
        TrainConfig.for_stage("pretrain", freeze_prompt_encoder=True).validate()


# -- freeze contract and zero-shot hygiene ---------------------------------------------------------


def _tiny_split(domain, n, seed=0):
    samples = [render(domain_spec(domain, 64), seed, i) for i in range(n)]
    images, masks = stack(samples)
    return Split(images, masks, [domain] * n)


def test_freeze_contract(toy_bundle):
    train, val = _tiny_split("A", 6), _tiny_split("A", 2, seed=1)
    frozen = [toy_bundle.encoder, toy_bundle.prompt_encoder]
    before = [m.digest() for m in frozen]
    dec_before = toy_bundle.decoder.digest()
    cfg = TrainConfig.for_stage("finetune", seed=0, epochs=2, batch_size=3, lr=1e-2)
    finetune_decoder(toy_bundle, train, val, cfg)
    assert [m.digest() for m in frozen] == before
    assert toy_bundle.decoder.digest() != dec_before
    assert [e["stage"] for e in toy_bundle.provenance] == ["finetune"]


def test_freeze_violation_detected(toy_bundle, monkeypatch):
    import pseg.pipeline as P
    train, val = _tiny_split("A", 4), _tiny_split("A", 2, seed=1)
    real = P.train_loop

    def tampering(*a, on_epoch=None, **kw):
        def hook(epoch):
            toy_bundle.encoder.parameters()[0].data[0] += 1.0
            on_epoch(epoch)
        return real(*a, on_epoch=hook, **kw)

    monkeypatch.setattr(P, "train_loop", tampering)
    cfg = TrainConfig.for_stage("finetune", seed=0, epochs=1, batch_size=2)
    with pytest.raises(FreezeViolation):
        finetune_decoder(toy_bundle, train, val, cfg)


def test_zero_shot_provenance(toy_bundle):
    toy_bundle.record(stage="pretrain", train_domains="A")
    check_zero_shot(toy_bundle, {"B": _tiny_split("B", 1)})
    with pytest.raises(ProvenanceError):
        check_zero_shot(toy_bundle, {"A": _tiny_split("A", 1)})


# -- command line -----------------------------------------------------------------------------------

TOY_CFG = "\n".join(
    ["# toy model: G = 4, C = 8"]
    + [line for line in ModelBundle(toy_model_config()).config_lines()
       if line.startswith(("encoder.", "prompt.", "decoder."))]
)


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CFG + "\nepochs = 1\nbatch_size = 4\n", encoding="utf-8")
    for dom, n in (("A", 20), ("B", 4), ("C", 4)):
        assert main(["gen-data", "--domain", dom, "--n", str(n), "--seed", "1",
                     "--image-size", "64", "--out", str(root / dom)]) == 0
    assert main(["pretrain", "--data", str(root / "A"), "--config", str(cfg), "--seed", "0",
                 "--out", str(root / "pre")]) == 0
    assert main(["train-detector", "--data", str(root / "A"), "--bundle", str(root / "pre"),
                 "--seed", "0", "--set", "epochs=1", "--set", "detector.input_size=64",
                 "--set", "detector.channels=4,4,4", "--out", str(root / "det")]) == 0
    assert main(["finetune", "--bundle", str(root / "det"), "--data", str(root / "A"),
                 "--seed", "0", "--set", "epochs=1", "--out", str(root / "ft")]) == 0
    return root


def test_gen_data_layout(cli_run):
    d = cli_run / "A"
    assert len(list((d / "images").glob("*.ppm"))) == 20
    assert len(list((d / "masks").glob("*.pgm"))) == 20
    assert (d / "manifest.tsv").exists()


def test_gen_data_example(tmp_path):
    assert main(["gen-data", "--domain", "A", "--n", "4", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.rglob("*.ppm"))) == 4 and len(list(tmp_path.rglob("*.pgm"))) == 4


def test_pipeline_commands(cli_run, capsys):
    r = cli_run
    bundle = ModelBundle.load(r / "ft")
    assert [e["stage"] for e in bundle.provenance] == ["pretrain", "detector", "finetune"]
    assert bundle.provenance[-1]["prompt_source"] == "detector_box"
    out = r / "z.csv"
    assert main(["zeroshot-table", "--bundle", str(r / "ft"), "--data-b", str(r / "B"),
                 "--data-c", str(r / "C"), "--out-csv", str(out)]) == 0
    recs = read_report(out.read_text())
    assert {(x.generator, x.eval_domain) for x in recs} == \
        {(g, d) for g in ("none", "gt_box", "detector_box") for d in "BC"}
    assert all(0 <= x.miou <= 100 for x in recs)
    assert main(["eval", "--bundle", str(r / "ft"), "--data", str(r / "B"), "--generator",
                 "gt_points", "--k", "2"]) == 0
    assert "points_k02" in capsys.readouterr().out
    assert main(["sweep", "--bundle", str(r / "ft"), "--data-b", str(r / "B"), "--data-c",
                 str(r / "C"), "--k-set", "1,2", "--out-csv", str(r / "s.csv")]) == 0
    assert len(read_report((r / "s.csv").read_text())) == 2 * 4


def test_segment_command(cli_run):
    r = cli_run
    img = r / "A" / "images" / "A_00003.ppm"
    assert main(["segment", "--bundle", str(r / "ft"), "--image", str(img), "--generator",
                 "detector_box", "--out", str(r / "seg")]) == 0
    mask = (r / "seg" / "A_00003_mask.pgm").read_bytes()
    assert mask.startswith(b"P5\n64 64\n255\n")
    assert set(mask[len(b"P5\n64 64\n255\n"):]) <= {0, 255}
    assert (r / "seg" / "A_00003_overlay.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    # gt_box without a mask is a configuration error
    assert main(["segment", "--bundle", str(r / "ft"), "--image", str(img), "--generator",
                 "gt_box", "--out", str(r / "seg")]) == 1
    assert main(["segment", "--bundle", str(r / "ft"), "--image", str(img), "--generator",
                 "gt_box", "--mask", str(r / "A" / "masks" / "A_00003.pgm"),
                 "--out", str(r / "seg2")]) == 0


def test_missing_seed_names_flag(cli_run, capsys):
    code = main(["pretrain", "--data", str(cli_run / "A"), "--out", str(cli_run / "x")])
    assert code == 1
    assert "--seed" in capsys.readouterr().err


def test_unknown_flag_and_key(cli_run, capsys):
    assert main(["gen-data", "--domain", "A", "--seed", "1", "--out", "x", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["pretrain", "--data", str(cli_run / "A"), "--seed", "0", "--set", "nope=1",
                 "--out", str(cli_run / "x")]) == 1


def test_corrupt_pixmap_exit_code(cli_run, capsys):
    bad = cli_run / "broken.ppm"
    bad.write_bytes(encode_ppm(np.zeros((64, 64, 3), np.uint8))[:100])
    code = main(["segment", "--bundle", str(cli_run / "ft"), "--image", str(bad),
                 "--generator", "none", "--out", str(cli_run / "seg")])
    assert code == 2
    assert "broken.ppm" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_code(cli_run, tmp_path, capsys):
    import shutil
    dst = tmp_path / "bundle"
    shutil.copytree(cli_run / "ft", dst)
    data = bytearray((dst / "base.pseg").read_bytes())
    data[40] ^= 0xFF
    (dst / "base.pseg").write_bytes(bytes(data))
    code = main(["zeroshot-table", "--bundle", str(dst), "--data-b", str(cli_run / "B"),
                 "--data-c", str(cli_run / "C")])
    assert code == 2
    assert "base.pseg" in capsys.readouterr().err


def test_zero_shot_violation_exit_code(cli_run):
    assert main(["zeroshot-table", "--bundle", str(cli_run / "ft"), "--data-b", str(cli_run / "A"),
                 "--data-c", str(cli_run / "C")]) == 2


def test_pretrain_is_deterministic(cli_run, tmp_path):
    cfg = cli_run / "toy.cfg"
    assert main(["pretrain", "--data", str(cli_run / "A"), "--config", str(cfg), "--seed", "0",
                 "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "base.pseg").read_bytes() == (cli_run / "pre" / "base.pseg").read_bytes()


def test_manual_box(cli_run, capsys):
    img = str(cli_run / "A" / "images" / "A_00001.ppm")
    base = ["segment", "--bundle", str(cli_run / "ft"), "--image", img, "--out", str(cli_run / "seg3")]
    assert main(base + ["--box", "0.2,0.2,0.8,0.8"]) == 0
    assert main(base + ["--box", "0.8,0.2,0.2,0.8"]) == 2
    assert "invalid box" in capsys.readouterr().err
    assert main(base + ["--box", "0.1,0.2"]) == 1
