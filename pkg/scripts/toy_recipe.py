#!/usr/bin/env python3
"""Run the toy end-to-end recipe: python3 scripts/toy_recipe.py --workdir /tmp/recipe"""
import sys

from mtk.recipe import main

if __name__ == "__main__":
    sys.exit(main())
