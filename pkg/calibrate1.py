import time
import numpy as np
from fusenmt.config import ExperimentConfig
from fusenmt.train import Trainer, prepare_task, pretrain_teacher_for


def make_cfg(n_pairs, strategies, seed, steps, pretrain_steps=600, pretrain_lr=1e-3):
    cfg = ExperimentConfig.from_dict({
        "task": {"kind": "lexswap-reorder", "n_pairs": n_pairs, "vocab_size": 120,
                 "len_range": [3, 9], "val_pairs": 150, "test_pairs": 150},
        "model": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                  "dropout": 0.1, "max_len": 32},
        "teacher": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                    "mask_prob": 0.15, "pretrain_steps": pretrain_steps,
                    "pretrain_lr": pretrain_lr, "token_budget": 2048, "dropout": 0.1},
        "training": {"steps": steps, "token_budget": 1024, "val_interval": 10 ** 9,
                     "log_interval": 200},
        "optimizer": {"warmup": 150, "lr_scale": 1.0},
        "seed": seed,
    })
    return cfg.with_strategy(strategies)


t0 = time.time()
for n_pairs, steps in [(1000, 700), (25000, 1100)]:
    gains = []
    for seed in (1, 2, 3):
        cfg_b = make_cfg(n_pairs, set(), seed, steps)
        data = prepare_task(cfg_b)
        teacher, info = pretrain_teacher_for(cfg_b, data)
        tr_b = Trainer(cfg_b, data)
        tr_b.run(quiet=True)
        bleu_b = tr_b.corpus_bleu(data.test_pairs, beam=1)
        cfg_ad = make_cfg(n_pairs, {"ad"}, seed, steps)
        tr_ad = Trainer(cfg_ad, data, teacher=teacher)
        tr_ad.run(quiet=True)
        bleu_ad = tr_ad.corpus_bleu(data.test_pairs, beam=1)
        gains.append(bleu_ad - bleu_b)
        print(f"n={n_pairs} seed={seed}: teacher_acc={info['masked_accuracy']:.3f} "
              f"base={bleu_b:.2f} ad={bleu_ad:.2f} gain={bleu_ad - bleu_b:+.2f} "
              f"[{time.time() - t0:.0f}s]", flush=True)
    print(f"n={n_pairs}: mean gain {np.mean(gains):+.2f}", flush=True)
print(f"total {time.time() - t0:.0f}s")
