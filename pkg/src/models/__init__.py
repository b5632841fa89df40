"""
Classical layer stack, presets and transfer surgery
"""
