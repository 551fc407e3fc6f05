import torch

# single-threaded keeps CPU reductions bit-reproducible across runs
torch.set_num_threads(1)
