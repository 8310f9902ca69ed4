# Makes "app" a package so uvicorn can import app.main:app
