import torch


def load_adapter(adapter_path):
    state = torch.load(adapter_path)
    return state
