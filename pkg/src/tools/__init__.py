"""
Datasets, checkpoints, run configuration, logging and reports
"""
