"""Tabletop simulator, scripted expert, demonstration dataset and task-chain evaluation."""
