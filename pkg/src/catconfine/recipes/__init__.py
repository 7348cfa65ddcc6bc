"""Bundled experiment configurations (desk-scale grids)."""
