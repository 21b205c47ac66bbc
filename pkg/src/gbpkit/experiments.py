"""Experiment stages shared by the command line and the acceptance suite."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, Pipeline, attack_sweep, write_sweep_csv
from .classify import LinearClassifier, group_activity, group_statistics, pool_groups
from .config import ExperimentConfig
from .container import read_matrix, write_matrix
from .data import (
    Standardizer,
    SyntheticDataset,
    SyntheticSpec,
    build_low_coherence_dictionary,
    generate_certified_instance,
    generate_layered_instance,
    generate_synthetic_dataset,
    load_mnist_idx,
    make_classifiers,
)
from .dictionary import L1, L2, Dictionary, GroupPartition, RegularizerSpec, elastic, mutual_coherence
from .errors import ConfigError, GenerationError, InfeasibleRequestError
from .nn import ARCHITECTURES, FeedforwardModel, build_mnist_model, build_synthetic_model
from .report import write_statistics_csv
from .solver import ConvergenceWarning, SolveOptions, solve_gbp_batch, solve_layered_gbp
from .stability import audit_row, verify_layered_recovery, verify_recovery, write_audit
from .train import TrainConfig, pretrain_dictionary, train_classifier, train_feedforward_approximator

CODE_FIELDS = ["id", "objective", "iterations", "support_size", "group_bitmap", "seed", "config_hash"]
NETS = set(ARCHITECTURES)


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    jobs: int = 1
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        if path.exists():
            try:
                self.manifest = json.loads(path.read_text())
            except ValueError:
                self.manifest = {}
        self.manifest.update({"experiment": self.cfg.experiment, "seed": self.cfg.seed,
                              "config_hash": self.cfg.config_hash})
        self.manifest.setdefault("stages", [])

    def record(self, stage, **info):
        if stage not in self.manifest["stages"]:
            self.manifest["stages"].append(stage)
        self.manifest.update(info)
        self.save_manifest()

    def save_manifest(self):
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    @property
    def seed(self):
        return self.cfg.seed

    @property
    def hash(self):
        return self.cfg.config_hash

    def opts(self):
        s = self.cfg.solver
        return SolveOptions(tol=s.tol, max_iter=s.max_iter, nonnegative=s.nonnegative)

    def train_config(self, loss="hinge", gap=False, lr=None):
        t = self.cfg.train
        return TrainConfig(epochs_max=t.epochs_max, early_stop_patience=t.early_stop_patience,
                           gamma_warmup_epochs=min(t.gamma_warmup_epochs, t.epochs_max), batch_size=t.batch_size,
                           learning_rate=lr or t.learning_rate, momentum=t.momentum, seed=self.seed, loss=loss,
                           gap_weight=t.gap_weight if gap else 0.0)


def _solve(X, D, spec, opts, jobs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return solve_gbp_batch(X, D, spec, opts, jobs=jobs)


def write_codes_csv(path, batch, partition, seed, config_hash):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CODE_FIELDS)
        active = group_activity(batch.codes, partition)
        for i in range(len(batch)):
            w.writerow([i, repr(float(batch.objective[i])), int(batch.iterations[i]),
                        int(np.count_nonzero(batch.codes[i])), "".join("1" if a else "0" for a in active[i]),
                        seed, config_hash])


# --- synthetic ---------------------------------------------------------------

@dataclass
class SyntheticData:
    D: Dictionary
    mu: float
    clf_full: LinearClassifier
    clf_pooled: LinearClassifier
    nopool: SyntheticDataset
    pooled: SyntheticDataset
    spec: SyntheticSpec

    @property
    def partition(self):
        return self.spec.partition


def synthetic_spec(cfg):
    ds = cfg.dataset
    return SyntheticSpec(n=ds.n, m=ds.m, group_size=ds.group_size, active_groups=ds.active_groups,
                         amplitude=tuple(ds.amplitude), count=ds.count, margin=ds.margin, seed=cfg.seed + 2)


def generate_synthetic(cfg) -> SyntheticData:
    sp = synthetic_spec(cfg)
    dc = cfg.dictionary
    D, mu = build_low_coherence_dictionary(sp.n, sp.m, sp.partition, seed=cfg.seed,
                                           target_mu=dc.target_mu or None, max_rounds=dc.max_rounds)
    cf, cp = make_classifiers(sp.m, sp.n_groups, seed=cfg.seed + 1)
    a, b = generate_synthetic_dataset(D, sp, cf, cp)
    return SyntheticData(D, mu, cf, cp, a, b, sp)


def save_synthetic(run: Run, data: SyntheticData):
    o = run.out
    write_matrix(o / "dictionary.bin", data.D.matrix)
    data.clf_full.save(o / "classifier_full.bin")
    data.clf_pooled.save(o / "classifier_pooled.bin")
    data.nopool.save(o / "data_nopool", seed=run.seed)
    data.pooled.save(o / "data_pooled", seed=run.seed)
    run.record("gen-data", achieved_mu=data.mu, dictionary_shape=list(data.D.shape))


def load_synthetic(run: Run) -> SyntheticData:
    o = run.out
    need = ["dictionary.bin", "classifier_full.bin", "classifier_pooled.bin", "data_nopool", "data_pooled"]
    if not all((o / n).exists() for n in need) or run.manifest.get("data_hash") != run.hash:
        save_synthetic(run, generate_synthetic(run.cfg))
        run.record("gen-data", data_hash=run.hash)
    # always read back from disk so staged and one-shot runs see bit-identical inputs
    D = Dictionary(read_matrix(o / "dictionary.bin"))
    sp = synthetic_spec(run.cfg)
    return SyntheticData(D, mutual_coherence(D), LinearClassifier.load(o / "classifier_full.bin"),
                         LinearClassifier.load(o / "classifier_pooled.bin"), SyntheticDataset.load(o / "data_nopool"),
                         SyntheticDataset.load(o / "data_pooled"), sp)


def split_indices(n, test_fraction):
    n_test = max(1, int(round(test_fraction * n)))
    return np.arange(n - n_test), np.arange(n - n_test, n)


def synthetic_methods(cfg):
    pooled = cfg.experiment == "synthetic-pooled"
    allowed = {"PGBP", "PGBP+gap"} | NETS if pooled else {"BP", "GBP", "BP+gap", "GBP+gap"}
    bad = [m for m in cfg.methods if m not in allowed]
    if bad:
        raise ConfigError(f"methods: {bad} not available for experiment {cfg.experiment}; choose from {sorted(allowed)}")
    return list(cfg.methods)


def method_pipeline(method, data: SyntheticData, cfg, opts):
    base = method.split("+")[0]
    gap = method.endswith("+gap")
    g = cfg.solver.gamma
    if base == "BP":
        spec = RegularizerSpec.uniform(GroupPartition.singletons(data.spec.m), L1, g)
        clf, pooled = data.clf_full, False
    elif base == "GBP":
        spec = RegularizerSpec.uniform(data.partition, L2, g)
        clf, pooled = data.clf_full, False
    else:
        spec = RegularizerSpec.uniform(data.partition, L2, g)
        clf, pooled = data.clf_pooled, True
    return Pipeline(data.D, spec, clf, "hinge", pooled=pooled, opts=opts,
                    gap_weight=cfg.train.gap_weight if gap else 0.0, unroll=cfg.attack.unroll)


def solve_stage(run: Run, data: SyntheticData | None = None):
    """Code the test split with every coding method; writes codes_<method>.csv."""
    data = data or load_synthetic(run)
    cfg = run.cfg
    ds = data.pooled if cfg.experiment == "synthetic-pooled" else data.nopool
    _, te = split_indices(len(ds), cfg.dataset.test_fraction)
    out = {}
    for method in synthetic_methods(cfg):
        if method in NETS or method in out:
            continue
        p = method_pipeline(method, data, cfg, run.opts())
        res = _solve(ds.X[te], data.D, p.spec, p.opts, run.jobs)
        write_codes_csv(run.out / f"codes_{method}.csv", res, data.partition, run.seed, run.hash)
        out[method] = res
    run.record("solve")
    return out


def train_stage(run: Run, data: SyntheticData | None = None):
    """Fit the feedforward approximators to the pooled codes of the training split."""
    data = data or load_synthetic(run)
    cfg = run.cfg
    nets = [m for m in synthetic_methods(cfg) if m in NETS]
    if not nets:
        run.record("train")
        return {}
    ds = data.pooled
    tr, _ = split_indices(len(ds), cfg.dataset.test_fraction)
    spec = RegularizerSpec.uniform(data.partition, L2, cfg.solver.gamma)
    targets = pool_groups(_solve(ds.X[tr], data.D, spec, run.opts(), run.jobs).codes, data.partition)
    models = {}
    (run.out / "models").mkdir(exist_ok=True)
    for tag in nets:
        m = build_synthetic_model(tag, n_in=data.spec.n, code_dim=data.spec.n_groups, token=data.spec.group_size,
                                  classifier=data.clf_pooled, seed=run.seed)
        res = train_feedforward_approximator(ds.X[tr], targets, m,
                                             run.train_config(lr=run.cfg.train.approximator_learning_rate))
        m.save(run.out / "models" / f"{tag}.bin")
        res.log.write_csv(run.out / "models" / f"{tag}_log.csv")
        models[tag] = m
    run.record("train")
    return models


def load_models(run: Run, tags):
    out = {}
    for tag in tags:
        p = run.out / "models" / f"{tag}.bin"
        if p.exists():
            out[tag] = FeedforwardModel.load(p)
    return out


def statistics_stage(run: Run, data: SyntheticData, codes: dict, models: dict):
    cfg = run.cfg
    ds = data.pooled if cfg.experiment == "synthetic-pooled" else data.nopool
    _, te = split_indices(len(ds), cfg.dataset.test_fraction)
    truth = group_activity(ds.codes[te], data.partition)
    stats = {}
    for method in synthetic_methods(cfg):
        if method in NETS:
            if method in models:
                est = models[method].encode(ds.X[te]) > 0
                stats[method] = group_statistics(est, truth)
        elif method in codes:
            stats[method] = group_statistics(group_activity(codes[method].codes, data.partition), truth)
    write_statistics_csv(stats, run.out / "group_statistics.csv", run.seed, run.hash)
    return stats


def net_evaluator(model: FeedforwardModel):
    def predict(Y):
        out = model.forward(Y)
        return (out[:, 0] > 0).astype(np.int64) if out.shape[1] == 1 else np.argmax(out, axis=1)
    return predict


def attack_stage(run: Run, data: SyntheticData | None = None, models=None):
    data = data or load_synthetic(run)
    cfg = run.cfg
    ac = cfg.attack
    ds = data.pooled if cfg.experiment == "synthetic-pooled" else data.nopool
    _, te = split_indices(len(ds), cfg.dataset.test_fraction)
    idx = te[:ac.n_samples]
    methods = synthetic_methods(cfg)
    nets = [m for m in methods if m in NETS]
    models = models if models is not None else load_models(run, nets)
    all_rows = []
    crafted = False
    for method in methods:
        if method in NETS:
            continue
        p = method_pipeline(method, data, cfg, run.opts())
        acfg = AttackConfig(0.0, ac.steps, include_gap_term=method.endswith("+gap"), norm=ac.norm)
        evaluators = {}
        if method == "PGBP" and not crafted:
            evaluators = {tag: net_evaluator(models[tag]) for tag in nets if tag in models}
            crafted = True
        rows = attack_sweep(p, ds.X[idx], ds.labels[idx], ac.epsilons, acfg, method=method, evaluators=evaluators,
                            seed=run.seed, config_hash=run.hash)
        all_rows.extend(rows)
    by_method = {}
    for r in all_rows:
        by_method.setdefault(r["method"], []).append(r)
    for method, rows in by_method.items():
        write_sweep_csv(rows, run.out / f"sweep_{method.replace('+', '_')}.csv")
    run.record("attack")
    return all_rows


def run_synthetic(run: Run, with_attack=True):
    data = load_synthetic(run)
    codes = solve_stage(run, data)
    models = train_stage(run, data)
    stats = statistics_stage(run, data, codes, models)
    rows = attack_stage(run, data, models) if with_attack else []
    return stats, rows


# --- certificates ------------------------------------------------------------

def _tags(name):
    return {"l1": L1, "l2": L2, "elastic": elastic(0.8), "mixed": "mixed"}[name]


def run_certify(run: Run):
    """Generate certified instances, solve them and audit every recovery claim.  Returns True if all pass."""
    c = run.cfg.certify
    part = GroupPartition.contiguous(c.m, c.group_size)
    opts = SolveOptions(tol=1e-10, max_iter=50000)
    rows, ok = [], True
    for i in range(c.instances):
        seed = run.seed * 100003 + i
        try:
            inst = generate_certified_instance(c.n, c.m, part, c.noise_level, c.c, tags=_tags(c.tags),
                                               n_active=c.n_active, seed=seed)
        except (InfeasibleRequestError, GenerationError) as exc:
            raise ConfigError(f"certify: {exc}") from None
        r = _solve(inst.Y[None, :], inst.D, inst.spec, opts, 1).result(0, part)
        rep = verify_recovery(r, inst.gamma_true, inst.certificate, inst.spec, D=inst.D, Y=inst.Y, opts=opts, seed=seed)
        ok &= rep.passed
        rows.append(audit_row(i, inst.certificate, rep, seed, run.hash))
    write_audit(rows, run.out / "certify_audit.csv", run.out / "certify_audit.txt")
    run.record("certify", certify_passed=bool(ok), certify_instances=c.instances)
    return ok


def run_layered(run: Run):
    c = run.cfg.certify
    opts = SolveOptions(tol=1e-10, max_iter=50000)
    ok = True
    with open(run.out / "layered_audit.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "layer", "linf_error", "linf_bound", "local_error", "local_bound", "passed", "seed",
                    "config_hash"])
        for i in range(c.instances):
            seed = run.seed * 100003 + i
            li = generate_layered_instance(noise_level=c.noise_level, c=c.c, seed=seed)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                res = solve_layered_gbp(li.Y, li.problem, opts)
            for j, rec in enumerate(verify_layered_recovery(res.codes, li.codes_true, li.problem, li.bounds), 1):
                ok &= rec.passed
                w.writerow([i, j, repr(rec.linf_error), repr(rec.linf_bound), repr(rec.local_error),
                            repr(rec.local_bound), rec.passed, seed, run.hash])
    run.record("layered-bounds", layered_passed=bool(ok))
    return ok


# --- MNIST -------------------------------------------------------------------

MNIST_FILES = {"train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
               "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte"}


def find_mnist_files(directory):
    d = Path(directory)
    out = {}
    for key, stem in MNIST_FILES.items():
        hits = [p for p in (d / stem, d / (stem + ".gz"), d / stem.replace("-idx", ".idx")) if p.exists()]
        if not hits:
            raise ConfigError(f"dataset.mnist_dir: {stem}[.gz] not found in {d}")
        out[key] = hits[0]
    return out


def run_mnist(run: Run, with_attack=True):
    """Desk-scale MNIST pipeline: pretrain, code, classify, approximate, attack."""
    cfg = run.cfg
    ds, dc = cfg.dataset, cfg.dictionary
    files = find_mnist_files(ds.mnist_dir)
    train = load_mnist_idx(files["train_images"], files["train_labels"])
    test = load_mnist_idx(files["test_images"], files["test_labels"])
    Xtr, ytr = train.flat()[:ds.mnist_train_count], train.labels[:ds.mnist_train_count].astype(np.int64)
    Xte, yte = test.flat()[:ds.mnist_test_count], test.labels[:ds.mnist_test_count].astype(np.int64)
    st = Standardizer.fit(Xtr)
    st.save(run.out / "standardizer.bin")
    Xtr, Xte = st.transform(Xtr), st.transform(Xte)
    low, high = float(Xtr.min()), float(Xtr.max())
    run.record("gen-data", mnist_train=len(ytr), mnist_test=len(yte))
    atoms = dc.atoms
    grouped = GroupPartition.contiguous(atoms, dc.mnist_group_size)
    single = GroupPartition.singletons(atoms)
    g = cfg.solver.gamma
    specs = {"BP": RegularizerSpec.uniform(single, L1, g), "GBP": RegularizerSpec.uniform(grouped, L2, g)}
    dicts = {}
    for fam, spec in specs.items():
        if any(m.split("+")[0] in ((fam,) if fam == "BP" else ("GBP", "PGBP")) for m in cfg.methods) or \
                (fam == "GBP" and any(m in NETS for m in cfg.methods)):
            tc = run.train_config()
            tc = TrainConfig(**{**tc.__dict__, "epochs_max": cfg.train.pretrain_epochs,
                                "gamma_warmup_epochs": min(tc.gamma_warmup_epochs, cfg.train.pretrain_epochs)})
            pre = pretrain_dictionary(Xtr, spec, tc, opts=run.opts())
            dicts[fam] = pre.dictionary
            write_matrix(run.out / f"dictionary_{fam}.bin", pre.dictionary.matrix)
            pre.log.write_csv(run.out / f"pretrain_{fam}_log.csv")
    codes_tr, codes_te = {}, {}
    for fam, D in dicts.items():
        codes_tr[fam] = _solve(Xtr, D, specs[fam], run.opts(), run.jobs).codes
        res = _solve(Xte, D, specs[fam], run.opts(), run.jobs)
        codes_te[fam] = res.codes
        write_codes_csv(run.out / f"codes_{fam}.csv", res, specs[fam].partition, run.seed, run.hash)
    run.record("solve")
    pipes, models = {}, {}
    (run.out / "models").mkdir(exist_ok=True)
    for method in cfg.methods:
        if method in NETS:
            continue
        base = method.split("+")[0]
        fam = "BP" if base == "BP" else "GBP"
        pooled = base == "PGBP"
        feats = pool_groups(codes_tr[fam], grouped) if pooled else codes_tr[fam]
        res = train_classifier(feats, ytr, run.train_config("cross_entropy", gap=method.endswith("+gap")),
                               n_classes=10, partition=specs[fam].partition)
        res.classifier.save(run.out / "models" / f"classifier_{method.replace('+', '_')}.bin")
        res.log.write_csv(run.out / "models" / f"classifier_{method.replace('+', '_')}_log.csv")
        pipes[method] = Pipeline(dicts[fam], specs[fam], res.classifier, "cross_entropy", pooled=pooled,
                                 opts=run.opts(), gap_weight=cfg.train.gap_weight if method.endswith("+gap") else 0.0,
                                 unroll=cfg.attack.unroll)
    nets = [m for m in cfg.methods if m in NETS]
    if nets:
        if "PGBP" not in pipes:
            feats = pool_groups(codes_tr["GBP"], grouped)
            clf = train_classifier(feats, ytr, run.train_config("cross_entropy"), n_classes=10).classifier
            pipes["PGBP"] = Pipeline(dicts["GBP"], specs["GBP"], clf, "cross_entropy", pooled=True, opts=run.opts(),
                                     unroll=cfg.attack.unroll)
        targets = pool_groups(codes_tr["GBP"], grouped)
        for tag in nets:
            m = build_mnist_model(tag, n_in=Xtr.shape[1], code_dim=grouped.n_groups,
                                  classifier=pipes["PGBP"].classifier, seed=run.seed)
            r = train_feedforward_approximator(Xtr, targets, m, run.train_config())
            m.save(run.out / "models" / f"{tag}.bin")
            r.log.write_csv(run.out / "models" / f"{tag}_log.csv")
            models[tag] = m
    run.record("train")
    rows = []
    if with_attack:
        ac = cfg.attack
        n = min(ac.n_samples, len(yte))
        for method, p in pipes.items():
            if method not in cfg.methods and not (method == "PGBP" and nets):
                continue
            ev = {tag: net_evaluator(models[tag]) for tag in nets} if method == "PGBP" else {}
            acfg = AttackConfig(0.0, ac.steps, low, high, include_gap_term=method.endswith("+gap"), norm=ac.norm)
            rows += attack_sweep(p, Xte[:n], yte[:n], ac.epsilons, acfg, method=method, evaluators=ev,
                                 seed=run.seed, config_hash=run.hash)
        by = {}
        for r in rows:
            by.setdefault(r["method"], []).append(r)
        for method, rs in by.items():
            write_sweep_csv(rs, run.out / f"sweep_{method.replace('+', '_')}.csv")
        run.record("attack")
    return rows
