//! File formats, parameter checkpoints, the command-line tool and the
//! HTTP session service around [`metaction_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod scene_io;
pub mod service;
