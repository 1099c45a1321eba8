import time

import numpy as np

from fusenmt.config import ExperimentConfig
from fusenmt.train import Trainer, prepare_task, pretrain_teacher_for

BASE = {
    "task": {"kind": "lexswap-reorder", "n_pairs": 5000, "vocab_size": 400,
             "len_range": [3, 9], "val_pairs": 300, "test_pairs": 300,
             "n_successors": 3, "chain_prob": 0.85},
    "model": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
              "dropout": 0.1, "max_len": 32},
    "teacher": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                "mask_prob": 0.15, "pretrain_steps": 600, "pretrain_lr": 1e-3,
                "token_budget": 2048, "dropout": 0.1},
    "training": {"steps": 1100, "token_budget": 1024, "val_interval": 10 ** 9,
                 "log_interval": 400, "drift_interval": 10 ** 9},
    "optimizer": {"warmup": 150, "lr_scale": 1.0},
}

CELLS = [
    ("baseline", set(), None),
    ("ad", {"ad"}, None),
    ("ds", {"ds"}, None),
    ("sched", {"sched"}, None),
    ("all", {"ad", "ds", "sched"}, None),
    ("const1", {"sched"}, "const1"),
    ("frozen", {"sched"}, "frozen"),
]

t0 = time.time()
datas, teachers = {}, {}
scores = {}
for name, strategies, regime in CELLS:
    row = []
    for seed in (1, 2, 3):
        import copy
        import json

        pay = json.loads(json.dumps(BASE))
        pay["seed"] = seed
        if regime:
            pay["fusion"] = {"lm_regime": regime}
        cfg = ExperimentConfig.from_dict(pay).with_strategy(strategies)
        if seed not in datas:
            datas[seed] = prepare_task(cfg)
        data = datas[seed]
        teacher = None
        if cfg.needs_teacher:
            if seed not in teachers:
                teachers[seed] = pretrain_teacher_for(cfg, data)[0]
            teacher = copy.deepcopy(teachers[seed])
        tr = Trainer(cfg, data, teacher=teacher)
        tr.run(quiet=True)
        b = tr.corpus_bleu(data.test_pairs, beam=1)
        drift = tr.current_drift() if teacher is not None else None
        row.append((b, drift))
        print(f"{name} seed={seed}: bleu={b:.2f} drift={drift if drift is None else round(drift, 4)} "
              f"[{time.time() - t0:.0f}s]", flush=True)
    scores[name] = row
    print(f"{name}: mean {np.mean([b for b, _ in row]):+.2f}", flush=True)

print("\nsummary:")
for name, row in scores.items():
    print(name, [round(b, 2) for b, _ in row], "mean", round(np.mean([b for b, _ in row]), 2))
