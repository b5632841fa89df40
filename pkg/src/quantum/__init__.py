"""
Statevector simulation, variational circuits and dressed quantum networks
"""
