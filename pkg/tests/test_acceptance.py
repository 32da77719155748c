"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced (visible with ``-s``) and again in
the terminal summary. Toy recipes are fixed up front; nothing here is tuned
per run.
"""
import math
import time

import numpy as np
import pytest
import torch

from cotatron.archive import load_features, load_mel, save_features, save_mel
from cotatron.audio import SAMPLE_RATE, Waveform, mel_spectrogram, load_audio, voicing_decisions
from cotatron.checkpoint import parameter_digest
from cotatron.conversion import Converter
from cotatron.corpus import Manifest, Utterance, build_manifest, speaker_index, split_by_transcription
from cotatron.data import load_examples
from cotatron.evaluation import ProbeData, disentanglement_probe, sca, train_sca_classifier, vde
from cotatron.features import (
    ResidualConfig, ResidualEncoder, context_equivalence_check, extract_alignment, extract_features,
)
from cotatron.text import tokenize
from cotatron.toy import make_toy_corpus, random_sentence
from cotatron.training import (
    CotatronTrainer, TrainConfig, load_cotatron, load_vc, lr_schedule, moving_average, train_cotatron,
    train_vc,
)
from cotatron.tts import Cotatron, CotatronConfig, CotatronOutput, cotatron_loss
from cotatron.vc_decoder import ConditionalBatchNorm, GBlock, VCDecoderConfig

RESULTS: list[str] = []

# toy recipe shared by the training criteria
TOY_PRIOR_BETA = 4.9
COTATRON_STEPS = 1000
VC_STEPS = 1000


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} -- {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _random_text(rng) -> str:
    return random_sentence(rng)


# --- shared fixtures -------------------------------------------------------------

@pytest.fixture(scope="module", autouse=True)
def _threads():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


@pytest.fixture(scope="module")
def toy2(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy2")
    make_toy_corpus(root, n_speakers=2, n_transcripts=10, seed=0)
    manifest = build_manifest(root, "flat-tsv")
    speakers = speaker_index([manifest])
    return manifest, speakers, load_examples(manifest, speakers)


@pytest.fixture(scope="module")
def trained_cotatron(toy2, tmp_path_factory):
    _, speakers, examples = toy2
    cfg = TrainConfig(batch_size=10, lr_initial=1e-3, lr_final=1e-4, decay_start_step=COTATRON_STEPS // 2,
                      decay_end_step=COTATRON_STEPS, tf_rate=1.0, seed=0, max_steps=COTATRON_STEPS,
                      log_every=100)
    model_cfg = CotatronConfig.toy(n_speakers=len(speakers), prior_beta=TOY_PRIOR_BETA)
    t0 = time.perf_counter()
    model, ckpt, history = train_cotatron(examples, None, cfg, model_cfg, list(speakers),
                                          out_dir=tmp_path_factory.mktemp("cotatron"))
    return model, ckpt, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def trained_vc(toy2, trained_cotatron, tmp_path_factory):
    _, speakers, examples = toy2
    cotatron = trained_cotatron[0]
    before = parameter_digest(cotatron)
    # the default VC batch (128) covers the whole toy corpus
    cfg = TrainConfig.for_phase("vc", lr_initial=1e-3, lr_final=1e-3, max_steps=VC_STEPS, seed=0,
                                log_every=100)
    t0 = time.perf_counter()
    system, ckpt, history, trainer = train_vc(examples, cotatron, cfg, list(speakers),
                                              decoder_cfg=VCDecoderConfig.toy(),
                                              out_dir=tmp_path_factory.mktemp("vc"))
    frozen = all(not p.requires_grad for p in cotatron.parameters())
    return system, ckpt, history, before, parameter_digest(cotatron), frozen, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy4(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy4")
    manifest = make_toy_corpus(root, n_speakers=4, n_transcripts=40, seed=7)
    return split_by_transcription(manifest, (0.6, 0.2, 0.2), seed=0)


# --- criterion 1 -----------------------------------------------------------------

def _random_utterances(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        t = int(rng.integers(10, 120))
        mel = (rng.standard_normal((t, 80)) * 2.0 - 5.0).astype(np.float32)
        out.append((mel, tokenize(_random_text(rng))))
    return out


def test_c01_context_equivalence(toy2, trained_cotatron):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    random_model = Cotatron(CotatronConfig.toy(n_speakers=2, prior_beta=TOY_PRIOR_BETA))
    trained = trained_cotatron[0]
    utts = _random_utterances(20, seed=11)
    dev_random = max(context_equivalence_check(random_model, m, s) for m, s in utts)
    dev_trained = max(context_equivalence_check(trained, m, s) for m, s in utts)
    dev_corpus = max(context_equivalence_check(trained, e.mel, tokenize(e.transcript)) for e in toy2[2])
    worst = max(dev_random, dev_trained, dev_corpus)
    elapsed = time.perf_counter() - t0
    report(1, "L = A @ text_encoding matches decoder contexts", worst < 1e-5 and elapsed < 60,
           f"max deviation random-init {dev_random:.2e}, trained {dev_trained:.2e}, "
           f"trained on 20 corpus utterances {dev_corpus:.2e} (< 1e-5); {elapsed:.1f}s")


# --- criterion 2 -----------------------------------------------------------------

def test_c02_alignment_rows_stochastic():
    t0 = time.perf_counter()
    worst_sum, min_entry = 0.0, np.inf
    for case in range(100):
        rng = np.random.default_rng(1000 + case)
        torch.manual_seed(case % 5)
        model = Cotatron(CotatronConfig.toy(n_speakers=3)).eval()
        b = int(rng.integers(1, 4))
        t = rng.integers(1, 60, b)
        n = rng.integers(1, 30, b)
        mel = torch.zeros(b, int(t.max()), 80)
        ids = torch.zeros(b, int(n.max()), dtype=torch.long)
        for i in range(b):
            mel[i, : t[i]] = torch.as_tensor(rng.standard_normal((t[i], 80)) * 3.0 - 4.0, dtype=torch.float32)
            ids[i, : n[i]] = torch.as_tensor(rng.integers(1, 60, n[i]))
        with torch.no_grad():
            a = model(mel, torch.as_tensor(t), ids, torch.as_tensor(n)).alignment
        for i in range(b):
            rows = a[i, : t[i]]
            worst_sum = max(worst_sum, float((rows.sum(-1) - 1).abs().max()))
            min_entry = min(min_entry, float(rows.min()))
    elapsed = time.perf_counter() - t0
    report(2, "attention rows are probability vectors", worst_sum <= 1e-5 and min_entry >= 0 and elapsed < 60,
           f"100 random inputs, max |row sum - 1| {worst_sum:.2e}, min entry {min_entry:.2e}; {elapsed:.1f}s")


# --- criterion 3 -----------------------------------------------------------------

def _relative_jacobian_error(fn, inputs, eps=1e-6):
    """Compare autograd with central finite differences; returns ||J_a - J_n|| / ||J_n||."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.functional.jacobian(fn, tuple(inputs))
    num, ana = [], []
    out_numel = fn(*inputs).numel()
    for k, x in enumerate(inputs):
        cols = []
        flat = x.detach().clone().reshape(-1)
        for j in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[j] += eps
            minus[j] -= eps
            args_p = [a.detach() for a in inputs]
            args_m = [a.detach() for a in inputs]
            args_p[k] = plus.view_as(x)
            args_m[k] = minus.view_as(x)
            with torch.no_grad():
                cols.append(((fn(*args_p) - fn(*args_m)) / (2 * eps)).reshape(-1))
        num.append(torch.stack(cols, dim=1))
        ana.append(analytic[k].reshape(out_numel, -1))
    num, ana = torch.cat(num, dim=1), torch.cat(ana, dim=1)
    return float(torch.linalg.norm(ana - num) / torch.linalg.norm(num))


def test_c03_gradient_suite():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    errors = {}

    cfg = CotatronConfig.toy(attention_dim=6, static_filters=3, dynamic_filters=3, static_kernel=5,
                             dynamic_kernel=5)
    from cotatron.tts import DynamicConvolutionAttention
    att = DynamicConvolutionAttention(8, cfg).double()
    mask = torch.tensor([[True] * 7, [True] * 5 + [False] * 2])
    query = torch.randn(2, 8, dtype=torch.float64, generator=g)
    prev = torch.softmax(torch.randn(2, 7, dtype=torch.float64, generator=g), -1) * mask
    errors["DCA attention"] = _relative_jacobian_error(
        lambda q, p: att(q, p, mask).masked_fill(~mask, 0.0), [query, prev])

    cbn = ConditionalBatchNorm(3, 4).double()
    for lin in (cbn.gamma, cbn.beta):
        torch.nn.init.normal_(lin.weight, std=0.5, generator=g)
    cmask = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
    x = torch.randn(2, 3, 6, dtype=torch.float64, generator=g)
    y = torch.randn(2, 4, dtype=torch.float64, generator=g)
    errors["conditional batch norm"] = _relative_jacobian_error(
        lambda a, b: cbn(a, b, cmask) * cmask.unsqueeze(1), [x, y])

    block = GBlock(3, 4, 4, dilations=(1, 2, 4, 8)).double()
    for norm in block.norms:
        for lin in (norm.gamma, norm.beta):
            torch.nn.init.normal_(lin.weight, std=0.5, generator=g)
    x = torch.randn(2, 3, 10, dtype=torch.float64, generator=g)
    gmask = torch.tensor([[True] * 10, [True] * 7 + [False] * 3])
    errors["GBlock"] = _relative_jacobian_error(lambda a, b: block(a, b, gmask), [x, y])

    target = torch.randn(2, 5, 4, dtype=torch.float64, generator=g)
    labels = torch.tensor([0, 2])
    lengths = torch.tensor([5, 3])

    def loss_fn(pre, post, logits):
        out = CotatronOutput(pre, post, None, logits, None, None, None, lengths, None)
        return cotatron_loss(out, target, labels, lengths)[0].reshape(1)

    errors["cotatron_loss"] = _relative_jacobian_error(
        loss_fn, [torch.randn(2, 5, 4, dtype=torch.float64, generator=g),
                  torch.randn(2, 5, 4, dtype=torch.float64, generator=g),
                  torch.randn(2, 3, dtype=torch.float64, generator=g)])
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 120
    report(3, "central-difference gradient checks in float64", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" (< 1e-4); {elapsed:.1f}s")


# --- criterion 4 -----------------------------------------------------------------

def test_c04_toy_cotatron_overfit(toy2, trained_cotatron):
    model, _, history, elapsed = trained_cotatron
    manifest, _, examples = toy2
    assert len(examples) == 20 and max(u.duration for u in manifest) <= 3.0
    losses = [h["total"] for h in history]
    start = float(np.mean(losses[:10]))
    end = float(moving_average(losses)[-1])
    drop = 1.0 - end / start
    ex = examples[0]
    path = extract_alignment(model, ex.mel, tokenize(ex.transcript)).argmax(1)
    mono = float(np.mean(np.diff(path) >= 0))
    all_mono = np.mean([np.mean(np.diff(extract_alignment(model, e.mel, tokenize(e.transcript)).argmax(1)) >= 0)
                        for e in examples])
    ok = len(history) <= 2000 and drop >= 0.5 and mono >= 0.9 and elapsed <= 30 * 60
    report(4, "toy TTS overfit: loss drop and monotone alignment", ok,
           f"{len(history)} steps in {elapsed / 60:.1f} min, loss {start:.2f} -> {end:.2f} "
           f"(drop {100 * drop:.0f}%, need >= 50%), monotone argmax {100 * mono:.1f}% on "
           f"{ex.key.rsplit('/', 1)[-1]} (need >= 90%; corpus mean {100 * all_mono:.1f}%)")


# --- criterion 5 -----------------------------------------------------------------

def test_c05_toy_vc_overfit(toy2, trained_cotatron, trained_vc):
    manifest, speakers, examples = toy2
    cotatron = trained_cotatron[0]
    system, _, history, before, after, frozen, elapsed = trained_vc
    losses = [h["recon"] for h in history]
    start = float(np.mean(losses[:10]))
    by_500 = float(moving_average(losses[:500]).min())
    conv = Converter(cotatron, system, list(speakers))
    ex = examples[0]
    own = list(speakers)[ex.speaker]
    mel, _ = conv.convert_mel(ex.mel, ex.transcript, own)
    mse = float(np.mean((mel - ex.mel) ** 2))
    ok = before == after and frozen and by_500 <= 0.5 * start and mse < 0.05
    report(5, "toy VC overfit with a frozen encoder", ok,
           f"encoder hash unchanged {before == after}, loss {start:.2f} -> {by_500:.3f} within 500 steps "
           f"(need <= {0.5 * start:.2f}), same-speaker reconstruction MSE {mse:.4f} on "
           f"{ex.key.rsplit('/', 1)[-1]} after {len(history)} steps (need < 0.05); {elapsed / 60:.1f} min")


# --- criterion 6 -----------------------------------------------------------------

def test_c06_disentanglement_ordering(trained_cotatron, trained_vc, toy4):
    cotatron = trained_cotatron[0]
    residual = trained_vc[0].residual
    data = {"L": [], "L,R": [], "M": []}
    for split in toy4:
        feats = {k: [] for k in data}
        labels = []
        for u in split:
            mel = mel_spectrogram(load_audio(u.audio_path)).frames
            lf, r, _ = extract_features(cotatron, residual, mel, tokenize(u.transcript))
            feats["L"].append(lf)
            feats["L,R"].append(np.concatenate([lf, r], axis=1))
            feats["M"].append(mel)
            labels.append(u.speaker_id)
        for k in data:
            data[k].append(ProbeData(feats[k], labels))
    acc = {k: disentanglement_probe(k, *splits, epochs=30, seed=0).value for k, splits in data.items()}
    gap = acc["M"] - acc["L"]
    ok = acc["L"] < acc["M"] and gap >= 0.20 and acc["L"] <= acc["L,R"] <= acc["M"]
    report(6, "speaker probe ordering acc(L) <= acc(L,R) <= acc(M)", ok,
           f"acc(L) {100 * acc['L']:.1f}%, acc(L,R) {100 * acc['L,R']:.1f}%, acc(M) {100 * acc['M']:.1f}%, "
           f"gap {100 * gap:.1f}pp (need >= 20pp); chance 25%, 4 toy speakers, "
           f"{len(toy4[2])} test utterances; full-scale reference values are not targets")


# --- criterion 7 -----------------------------------------------------------------

def test_c07_lr_schedule_exactness():
    cfg = TrainConfig()
    checks = {0: 3e-4, 25_000: 3e-4, 50_000: 1.5e-5}
    exact = {s: abs(lr_schedule(s, cfg) - v) <= math.ulp(v) for s, v in checks.items()}
    mid = lr_schedule(37_500, cfg)
    ok = all(exact.values()) and abs(mid - 6.708e-5) <= 1e-8
    report(7, "learning-rate schedule values", ok,
           ", ".join(f"step {s} -> {lr_schedule(s, cfg)!r}" for s in checks)
           + f" (each within 1 ulp: {all(exact.values())}), step 37500 -> {mid:.6e} (6.708e-5 +- 1e-8)")


# --- criterion 8 -----------------------------------------------------------------

def test_c08_residual_invariants():
    torch.manual_seed(0)
    enc = ResidualEncoder(ResidualConfig()).eval()
    rng = np.random.default_rng(8)
    lengths = [1, 2, 21, 500] + rng.integers(1, 501, 26).tolist()
    preserved, inside = True, True
    worst_abs = 0.0
    with torch.no_grad():
        for t in lengths:
            mel = torch.as_tensor(rng.standard_normal((1, t, 80)) * 3 - 5, dtype=torch.float32)
            r = enc(mel, torch.tensor([t]))
            preserved &= r.shape == (1, t, 1)
            worst_abs = max(worst_abs, float(r.abs().max()))
            inside &= bool((r.abs() < 1).all())
        const_worst = 0.0
        for t, level in ((1, -3.0), (37, -11.5), (500, 0.7)):
            r = enc(torch.full((1, t, 80), level), torch.tensor([t]))
            const_worst = max(const_worst, float(r.abs().max()))
    ok = preserved and inside and const_worst == 0.0
    report(8, "residual path: length, constant input, open bound", ok,
           f"{len(lengths)} lengths in [1, 500] preserved {preserved}, max |R| {worst_abs:.4f} < 1, "
           f"constant input max |R| {const_worst} (must be exactly 0)")


# --- criterion 9 -----------------------------------------------------------------

def test_c09_vde_cases():
    t = np.arange(int(1.5 * SAMPLE_RATE)) / SAMPLE_RATE
    tone = Waveform((0.5 * np.sin(2 * np.pi * 140 * t)).astype(np.float32), SAMPLE_RATE)
    same = vde(tone, tone).value
    flags = voicing_decisions(tone).flags
    complementary = vde(flags, ~flags).value
    third = len(t) // 3
    silenced = tone.samples.copy()
    silenced[third:2 * third] = 0.0
    a = voicing_decisions(tone).flags
    b = voicing_decisions(Waveform(silenced, SAMPLE_RATE)).flags
    count = 0
    for i in range(min(len(a), len(b))):
        if bool(a[i]) != bool(b[i]):
            count += 1
    report_value = vde(tone, Waveform(silenced, SAMPLE_RATE))
    ok = same == 0.0 and complementary == 1.0 and round(report_value.value * report_value.n_samples) == count \
        and report_value.value == count / report_value.n_samples
    report(9, "voicing decision error cases", ok,
           f"VDE(x,x) {same}, complementary {complementary}, silenced middle {report_value.value:.4f} "
           f"= {count}/{report_value.n_samples} brute-force frames")


# --- criterion 10 ----------------------------------------------------------------

def test_c10_sca_chance_and_genuine(toy4):
    train, _, test = toy4
    mel = lambda m: [mel_spectrogram(load_audio(u.audio_path)).frames for u in m]
    train_mels, test_mels = mel(train), mel(test)
    clf = train_sca_classifier(train_mels, [u.speaker_id for u in train])
    genuine = sca(clf, test_mels, [u.speaker_id for u in test]).value
    rng = np.random.default_rng(10)
    labels = np.array([u.speaker_id for u in test])
    shuffled = np.mean([sca(clf, test_mels, rng.permutation(labels).tolist()).value for _ in range(200)])
    k = len(clf.labels)
    ok = k == 4 and abs(shuffled - 1 / k) <= 0.03 and genuine > 0.9
    report(10, "SCA chance baseline and genuine targets", ok,
           f"K={k}, shuffled-label SCA {100 * shuffled:.1f}% (1/K = {100 / k:.0f}% +- 3pp, 200 shuffles), "
           f"genuine-target SCA {100 * genuine:.1f}% on {len(test)} held-out utterances (need > 90%)")


# --- criterion 11 ----------------------------------------------------------------

def test_c11_determinism_and_round_trips(toy2, trained_vc, tmp_path):
    _, speakers, examples = toy2
    subset = examples[:6]

    def run(out):
        cfg = TrainConfig(batch_size=3, lr_initial=1e-3, lr_final=1e-4, decay_start_step=2, decay_end_step=4,
                          tf_rate=0.5, seed=3, max_steps=4, log_every=1)
        _, path, _ = train_cotatron(subset, None, cfg, CotatronConfig.toy(n_speakers=len(speakers)),
                                    list(speakers), out_dir=out)
        return path

    p1, p2 = run(tmp_path / "a"), run(tmp_path / "b")
    m1, c1 = load_cotatron(p1)
    m2, c2 = load_cotatron(p2)
    same_ckpt = parameter_digest(m1) == parameter_digest(m2) and c1["step"] == c2["step"]
    same_opt = all(torch.equal(a, b) for a, b in zip(_flat_state(c1["optimizer"]), _flat_state(c2["optimizer"])))

    # checkpoint round trip: load -> save -> load gives identical parameters
    system, vc_path = trained_vc[0], trained_vc[1]
    loaded, _ = load_vc(vc_path)
    ckpt_rt = parameter_digest(loaded) == parameter_digest(system)
    tr = CotatronTrainer(m1, TrainConfig(seed=3), subset, list(speakers))
    tr.load_state(c1)
    resaved, _ = load_cotatron(tr.save(tmp_path / "resaved.pt"))
    ckpt_rt &= parameter_digest(resaved) == parameter_digest(m1)

    rng = np.random.default_rng(11)
    mels_ok = True
    for t in (1, 7, 300):
        m = rng.standard_normal((t, 80)).astype(np.float32)
        save_mel(tmp_path / "x.mel", m)
        mels_ok &= load_mel(tmp_path / "x.mel").tobytes() == m.tobytes()
    entries = {e.key: (rng.standard_normal((e.n_frames, 64)).astype(np.float32),
                       rng.uniform(-1, 1, (e.n_frames, 1)).astype(np.float32)) for e in subset}
    save_features(tmp_path / "x.fea", entries)
    back = load_features(tmp_path / "x.fea")
    fea_ok = list(back) == list(entries) and all(
        back[k][0].tobytes() == v[0].tobytes() and back[k][1].tobytes() == v[1].tobytes()
        for k, v in entries.items())

    disjoint_trials = 0
    for trial in range(1000):
        r = np.random.default_rng(50_000 + trial)
        n = int(r.integers(3, 60))
        text_ids = r.integers(0, max(3, n // 2), n)
        if len(set(text_ids.tolist())) < 3:
            text_ids[:3] = [0, 1, 2]
        utts = tuple(Utterance(f"/x/{i}.wav", "t " + "".join("abcdefghij"[int(d)] for d in str(k)),
                               "ab"[i % 2], 1.0) for i, k in enumerate(text_ids))
        parts = split_by_transcription(Manifest(utts), seed=int(r.integers(0, 2**31)))
        sets = [{u.transcript for u in p} for p in parts]
        covered = sorted(u.audio_path for p in parts for u in p) == sorted(u.audio_path for u in utts)
        if not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]) and covered:
            disjoint_trials += 1
    ok = same_ckpt and same_opt and ckpt_rt and mels_ok and fea_ok and disjoint_trials == 1000
    report(11, "determinism and bit-exact round trips", ok,
           f"seeded runs identical params {same_ckpt} and optimizer {same_opt}, checkpoint round trip {ckpt_rt}, "
           f"COTA-MEL {mels_ok}, COTA-FEA {fea_ok}, split disjoint in {disjoint_trials}/1000 trials")


def _flat_state(state):
    out = []
    for v in state["state"].values():
        out.extend(t for t in v.values() if isinstance(t, torch.Tensor))
    return out
