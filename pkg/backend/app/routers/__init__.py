# Routers package: experiment runs and benchmark systems.
