#!/usr/bin/env python3
# Copyright (c) oatsu
from ._augment_dir import augment_dir
from ._bin2ply import bin2ply
from ._evaluate import EvalRow, average_row, evaluate, format_table, read_eval_csv, write_eval_csv
from ._ply2bin import ply2bin
from ._train_dir import load_block_dataset, train_dir
