//! Session service for interactive segmentation over HTTP and WebSocket.
//!
//! A [`registry::Registry`] holds volumes and their feature volumes,
//! shared read-only. Each session owns classes, annotations and similarity
//! maps behind a single-writer lock; annotation edits recompute the low
//! resolution map before responding, and refine jobs run one at a time on a
//! per-session worker. Events go out on `/sessions/{id}/events` as
//! `{"v":1,"type":...,"class_id":...,"digest":...}`.
//!
//! Routes:
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/volumes` | |
//! | POST | `/sessions` | `{"v":1,"volume_id":...}` |
//! | POST | `/sessions/load` | `{"v":1,"path":".../session.json"}` |
//! | GET | `/sessions/{id}` | |
//! | POST | `/sessions/{id}/classes` | class fields, `"advanced": true` to set `solver_cfg` |
//! | PATCH/DELETE | `/sessions/{id}/classes/{cid}` | partial class fields |
//! | POST | `/sessions/{id}/classes/{cid}/annotations` | `{"v":1,"points":[[x,y,z],...]}` |
//! | POST | `/sessions/{id}/classes/{cid}/erase` | `{"v":1,"point":[x,y,z],"radius":r}` |
//! | POST | `/sessions/{id}/classes/{cid}/refine` | |
//! | GET | `/sessions/{id}/slice/{axis}/{index}?overlay=1` | |
//! | GET | `/sessions/{id}/render?cam=<json>` | |
//! | POST | `/sessions/{id}/save` | |

pub mod api;
pub mod registry;
pub mod session;

pub use api::{router, serve, AppState};
pub use registry::Registry;
pub use session::{Event, EventKind, Session, SessionError, Snapshot};
