"""Stable superfast divide-and-conquer eigensolver for symmetric HSS matrices."""
