pub mod crf_oracle;
pub mod metric_oracle;
pub mod pgen_oracle;
