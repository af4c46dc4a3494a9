pub mod trial_oracle;
