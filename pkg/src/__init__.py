"""
Quantum transfer learning toolkit
"""
