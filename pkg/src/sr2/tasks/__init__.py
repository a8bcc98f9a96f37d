"""Sudoku and maze tasks: generators, validity predicates and encodings."""
