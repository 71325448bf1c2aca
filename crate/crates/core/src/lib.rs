//! Desk-scale cooperative-driving simulator: a waypointed road graph,
//! kinematic vehicles, a range-gated V2X message bus, a roadside
//! perception oracle, HV identification and priority-based intersection
//! management, driven by a deterministic fixed-step engine.

pub mod dynamics;
pub mod geom;
pub mod hv_ident;
pub mod manager;
pub mod perception;
pub mod road_map;
pub mod sim;
pub mod v2x;
