//! OpenAPI description served at `/spec`.

use serde_json::{json, Value};

fn error_response(description: &str) -> Value {
    json!({
        "description": description,
        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } }
    })
}

fn path_id(name: &str) -> Value {
    json!({ "name": name, "in": "path", "required": true, "schema": { "type": "string" } })
}

pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": {
            "title": "dac-service",
            "version": env!("CARGO_PKG_VERSION"),
            "description": "Abduction and edit jobs over a session store. Progress is polled; images are addressed by content hash."
        },
        "paths": {
            "/sessions": {
                "get": {
                    "summary": "List session manifests, oldest first",
                    "responses": { "200": { "description": "Manifests" } }
                },
                "post": {
                    "summary": "Upload a source image and prompts; queues the abduction job",
                    "requestBody": {
                        "required": true,
                        "content": { "multipart/form-data": { "schema": {
                            "type": "object",
                            "required": ["image", "p", "p_prime"],
                            "properties": {
                                "image": { "type": "string", "format": "binary" },
                                "p": { "type": "string", "description": "Prompt describing the source image" },
                                "p_prime": { "type": "string", "description": "Prompt describing the edited image" },
                                "config": { "type": "string", "description": "JSON object of abduction config overrides" }
                            },
                            "additionalProperties": { "type": "string", "description": "Individual abduction config override (JSON value)" }
                        } } }
                    },
                    "responses": {
                        "201": { "description": "Created", "content": { "application/json": { "schema": {
                            "type": "object",
                            "properties": { "session_id": { "type": "string" }, "job_id": { "type": "string" } }
                        } } } },
                        "400": error_response("Invalid image, prompt or config"),
                        "413": error_response("Upload exceeds the size limit")
                    }
                }
            },
            "/sessions/{id}": {
                "get": {
                    "summary": "Session manifest",
                    "parameters": [path_id("id")],
                    "responses": { "200": { "description": "Manifest" }, "404": error_response("Unknown session") }
                }
            },
            "/sessions/{id}/edits": {
                "get": {
                    "summary": "Stored edits of a session with their request echoes and scores",
                    "parameters": [path_id("id")],
                    "responses": { "200": { "description": "Edit records" }, "404": error_response("Unknown session") }
                },
                "post": {
                    "summary": "Queue an edit, seed batch or beta sweep; identical requests share one job",
                    "parameters": [path_id("id")],
                    "requestBody": {
                        "required": true,
                        "content": { "application/json": { "schema": { "$ref": "#/components/schemas/EditRequest" } } }
                    },
                    "responses": {
                        "200": { "description": "An identical request already has a job" },
                        "202": { "description": "Edit job queued", "content": { "application/json": { "schema": {
                            "type": "object",
                            "properties": { "job_id": { "type": "string" }, "status": { "type": "string" } }
                        } } } },
                        "404": error_response("Unknown session"),
                        "409": error_response("Session is not done"),
                        "422": error_response("beta outside [-1, 1] or otherwise invalid request")
                    }
                }
            },
            "/jobs": {
                "get": {
                    "summary": "All jobs, optionally for one session",
                    "parameters": [{ "name": "session", "in": "query", "required": false, "schema": { "type": "string" } }],
                    "responses": { "200": { "description": "Jobs" } }
                }
            },
            "/jobs/{id}": {
                "get": {
                    "summary": "Job status and progress",
                    "parameters": [path_id("id")],
                    "responses": {
                        "200": { "description": "Job", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Job" } } } },
                        "404": error_response("Unknown job")
                    }
                }
            },
            "/images/{hash}": {
                "get": {
                    "summary": "PNG by content hash",
                    "parameters": [path_id("hash")],
                    "responses": {
                        "200": { "description": "PNG bytes", "content": { "image/png": {} } },
                        "404": error_response("Unknown image")
                    }
                }
            },
            "/spec": {
                "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI document" } } }
            }
        },
        "components": { "schemas": {
            "Error": { "type": "object", "properties": { "error": { "type": "string" } } },
            "EditRequest": {
                "type": "object",
                "properties": {
                    "beta": { "type": "number", "minimum": -1, "maximum": 1, "default": 1 },
                    "seed": { "type": "integer", "default": 0 },
                    "steps": { "type": "integer", "minimum": 1, "default": dac_core::editor::DEFAULT_STEPS },
                    "n_seeds": { "type": "integer", "minimum": 1, "default": 1 },
                    "sweep_betas": { "type": "array", "items": { "type": "number" } },
                    "eta": { "type": "number", "exclusiveMinimum": 0, "maximum": 1 },
                    "use_t_aux": { "type": "boolean", "default": true },
                    "anneal": { "type": "boolean", "default": true }
                },
                "additionalProperties": false
            },
            "Job": {
                "type": "object",
                "properties": {
                    "id": { "type": "string" },
                    "kind": { "type": "string", "enum": ["abduct", "edit", "sweep"] },
                    "session_id": { "type": "string" },
                    "status": { "type": "string", "enum": ["queued", "running", "done", "failed"] },
                    "progress": { "type": "object", "properties": {
                        "iteration": { "type": "integer" },
                        "total": { "type": "integer" },
                        "stage": { "type": "string", "nullable": true },
                        "stage_iteration": { "type": "integer" },
                        "loss": { "type": "number", "nullable": true },
                        "smoothed_loss": { "type": "number", "nullable": true },
                        "loss_history": { "type": "array", "items": { "type": "array", "items": { "type": "number" } } }
                    } },
                    "created_unix": { "type": "integer" },
                    "started_unix": { "type": "integer", "nullable": true },
                    "finished_unix": { "type": "integer", "nullable": true },
                    "error": { "type": "string", "nullable": true },
                    "outputs": { "type": "array", "items": { "type": "object", "properties": {
                        "hash": { "type": "string" },
                        "url": { "type": "string" },
                        "beta": { "type": "number" },
                        "eta": { "type": "number" },
                        "seed": { "type": "integer" },
                        "image_alignment": { "type": "number", "nullable": true },
                        "text_alignment": { "type": "number", "nullable": true },
                        "cached": { "type": "boolean" }
                    } } }
                }
            }
        } }
    })
}
