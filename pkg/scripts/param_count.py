"""Parameter counts for the desk config and the full-size 384/8/12/1536 config."""

from clinseq.model import FlatModel, desk_config, paper_scaled_config
from clinseq.synth import cohort_vocabulary, default_toy_config

v = cohort_vocabulary(default_toy_config())
for name, cfg in (("desk", desk_config(len(v))), ("full-size", paper_scaled_config(len(v)))):
    m = FlatModel(cfg, v)
    print(f"{name:<10} d={cfg.d_model:<4} layers={cfg.n_layers:<2} heads={cfg.n_heads:<3} ff={cfg.d_ff:<5} "
          f"vocab={len(v)}  {m.n_parameters():>12,d} parameters")
