// refdic: desk-scale reference-aware captioning toolkit CLI.
//
// Subcommands: synth, build-groups, eval, train, generate, ablate.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal/runtime error.
// All artifacts are timestamp-free and byte-identical across reruns with the
// same seed. REFDIC_LOG={error,warn,info,debug} controls stderr logging.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "refdic/eval.hpp"
#include "refdic/groups.hpp"
#include "refdic/synth.hpp"
#include "refdic/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string join_tokens(const refdic::TokenSeq& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

// fixed-precision numbers for CSV artifacts
std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::map<std::string, refdic::TokenSeq> read_candidates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw refdic::DataError("cannot open candidates file: " + path);
  std::map<std::string, refdic::TokenSeq> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw refdic::DataError(path + ":" + std::to_string(lineno) +
                              ": invalid JSON: " + e.what());
    }
    std::string id, caption;
    try {
      id = j.at("image_id").get<std::string>();
      caption = j.at("caption").get<std::string>();
    } catch (const json::exception& e) {
      throw refdic::DataError(path + ":" + std::to_string(lineno) +
                              ": expected {\"image_id\",\"caption\"}: " + e.what());
    }
    if (!out.emplace(id, refdic::tokenize(caption)).second)
      throw refdic::DataError(path + ": duplicate candidate for image " + id);
  }
  if (out.empty()) throw refdic::DataError(path + ": no candidates");
  return out;
}

void write_candidates(const std::map<std::string, refdic::TokenSeq>& cands,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw refdic::DataError("cannot write " + path);
  for (const auto& [id, toks] : cands) {
    ordered_json j{{"image_id", id}, {"caption", join_tokens(toks)}};
    out << j.dump() << "\n";
  }
}

ordered_json report_json(const refdic::EvalReport& rep, const std::string& split) {
  ordered_json rows = ordered_json::array();
  for (const auto& r : rep.rows)
    rows.push_back(ordered_json{{"image_id", r.image_id},
                                {"caption", join_tokens(r.caption)},
                                {"B-1", r.b1},
                                {"B-4", r.b4},
                                {"C", r.c},
                                {"DisC", r.disc}});
  return ordered_json{{"split", split},       {"n", rep.rows.size()},
                      {"B-1", rep.b1},        {"B-4", rep.b4},
                      {"C", rep.c},           {"DisC", rep.disc},
                      {"rows", std::move(rows)}};
}

refdic::TrainConfig load_train_config(const std::string& path) {
  json j;
  try {
    j = json::parse(refdic::read_file_bytes(path));
  } catch (const json::exception& e) {
    throw refdic::DataError(path + ": invalid JSON: " + e.what());
  }
  return refdic::TrainConfig::from_json(j);
}

int run(int argc, char** argv) {
  CLI::App app{"refdic: reference-aware distinctive captioning toolkit"};
  app.require_subcommand(1);

  // ---- synth -----------------------------------------------------------------
  auto* synth = app.add_subcommand(
      "synth", "Generate a synthetic region-feature corpus with embeddings");
  uint64_t synth_seed = 42;
  refdic::SynthConfig sc;
  std::string synth_out;
  synth->add_option("--seed", synth_seed, "RNG seed")->capture_default_str();
  synth->add_option("--images", sc.n_images, "number of images")
      ->capture_default_str();
  synth->add_option("--captions", sc.captions_per_image, "captions per image")
      ->capture_default_str();
  synth->add_option("--d-feat", sc.d_feat, "region feature width")
      ->capture_default_str();
  synth->add_option("--d-emb", sc.d_emb, "embedding width")->capture_default_str();
  synth->add_option("--feature-noise", sc.feature_noise,
                    "std of per-proposal feature noise")
      ->capture_default_str();
  synth->add_option("--train-frac", sc.train_frac, "train split fraction")
      ->capture_default_str();
  synth->add_option("--val-frac", sc.val_frac, "val split fraction")
      ->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->required();

  // ---- build-groups ----------------------------------------------------------
  auto* bg = app.add_subcommand(
      "build-groups", "Construct reference groups by two-stage matching");
  std::string bg_manifest, bg_embeddings, bg_out;
  refdic::GroupBuildConfig gc;
  int bg_threads = 1;
  bg->add_option("--manifest", bg_manifest, "manifest JSON-lines")->required();
  bg->add_option("--embeddings", bg_embeddings, "embedding table file")->required();
  bg->add_option("--coarse-size", gc.coarse_size, "stage-1 candidate count")
      ->capture_default_str();
  bg->add_option("--p", gc.p, "first kept fine rank (1-indexed)")
      ->capture_default_str();
  bg->add_option("--k", gc.k, "group size")->capture_default_str();
  bg->add_option("--threads", bg_threads, "worker threads")->capture_default_str();
  bg->add_option("--out", bg_out, "output groups JSON")->required();

  // ---- eval ------------------------------------------------------------------
  auto* ev = app.add_subcommand(
      "eval", "Score candidate captions against reference groups");
  std::string ev_manifest, ev_groups, ev_candidates, ev_split = "val", ev_out;
  ev->add_option("--manifest", ev_manifest, "manifest JSON-lines")->required();
  ev->add_option("--groups", ev_groups, "groups JSON")->required();
  ev->add_option("--candidates", ev_candidates,
                 "JSON-lines {\"image_id\",\"caption\"}")
      ->required();
  ev->add_option("--split", ev_split, "split to evaluate")->capture_default_str();
  ev->add_option("--out", ev_out, "output report JSON")->required();

  // ---- train -----------------------------------------------------------------
  auto* tr = app.add_subcommand(
      "train", "Teacher-forced pretraining plus self-critical fine-tuning");
  std::string tr_config, tr_manifest, tr_groups, tr_out;
  tr->add_option("--config", tr_config, "training config JSON")->required();
  tr->add_option("--manifest", tr_manifest, "manifest JSON-lines")->required();
  tr->add_option("--groups", tr_groups, "groups JSON")->required();
  tr->add_option("--out", tr_out, "output directory")->required();

  // ---- generate --------------------------------------------------------------
  auto* gen = app.add_subcommand("generate",
                                 "Beam-search captions from a checkpoint");
  std::string gen_ckpt, gen_manifest, gen_groups, gen_split = "val", gen_out;
  int gen_beam = 5, gen_max_len = 20;
  gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
  gen->add_option("--manifest", gen_manifest, "manifest JSON-lines")->required();
  gen->add_option("--groups", gen_groups, "groups JSON")->required();
  gen->add_option("--beam", gen_beam, "beam width")->capture_default_str();
  gen->add_option("--max-len", gen_max_len, "maximum caption length")
      ->capture_default_str();
  gen->add_option("--split", gen_split, "split to caption")->capture_default_str();
  gen->add_option("--out", gen_out, "output captions JSON-lines")->required();

  // ---- ablate ----------------------------------------------------------------
  auto* ab = app.add_subcommand(
      "ablate", "Sweep reward coefficients (alpha_b, alpha_c, beta) to a CSV");
  std::string ab_config, ab_manifest, ab_groups, ab_grid, ab_out, ab_work;
  ab->add_option("--config", ab_config, "base training config JSON")->required();
  ab->add_option("--manifest", ab_manifest, "manifest JSON-lines")->required();
  ab->add_option("--groups", ab_groups, "groups JSON")->required();
  ab->add_option("--grid", ab_grid,
                 "grid JSON: [[alpha_b, alpha_c, beta], ...] (default: built-in)");
  ab->add_option("--out", ab_out, "output CSV")->required();
  ab->add_option("--work-dir", ab_work,
                 "directory for per-row training artifacts (default: <out>.d)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the error and usage hint
    return 1;
  }

  if (synth->parsed()) {
    refdic::SynthResult r = refdic::synth_corpus(synth_seed, sc);
    fs::create_directories(synth_out);
    std::string mpath = (fs::path(synth_out) / "manifest.jsonl").string();
    std::string epath = (fs::path(synth_out) / "embeddings.rdke").string();
    refdic::save_manifest(r.manifest, mpath);
    refdic::save_embeddings(r.embeddings, epath);
    refdic::log_msg(refdic::LogLevel::info,
                    "synth: " + std::to_string(r.manifest.images.size()) +
                        " images -> " + synth_out);
    std::cout << ordered_json{{"manifest", mpath}, {"embeddings", epath}}.dump()
              << "\n";
    return 0;
  }

  if (bg->parsed()) {
    refdic::DatasetManifest m = refdic::load_manifest(bg_manifest);
    refdic::EmbeddingTable emb = refdic::load_embeddings(bg_embeddings);
    std::vector<refdic::ReferenceGroup> groups =
        refdic::build_groups(m, emb, gc, bg_threads);
    refdic::save_groups(groups, bg_out);
    refdic::log_msg(refdic::LogLevel::info,
                    "build-groups: " + std::to_string(groups.size()) +
                        " groups -> " + bg_out);
    std::cout << ordered_json{{"groups", bg_out}, {"count", groups.size()}}.dump()
              << "\n";
    return 0;
  }

  if (ev->parsed()) {
    refdic::DatasetManifest m = refdic::load_manifest(ev_manifest);
    auto groups = refdic::group_index(refdic::load_groups(ev_groups));
    auto cands = read_candidates(ev_candidates);
    refdic::EvalReport rep =
        refdic::evaluate_candidates(m, groups, ev_split, cands);
    ordered_json j = report_json(rep, ev_split);
    refdic::write_file_bytes(ev_out, j.dump(2) + "\n");
    ordered_json summary{{"split", ev_split}, {"n", rep.rows.size()},
                         {"B-1", rep.b1},     {"B-4", rep.b4},
                         {"C", rep.c},        {"DisC", rep.disc}};
    std::cout << summary.dump() << "\n";
    return 0;
  }

  if (tr->parsed()) {
    refdic::TrainConfig cfg = load_train_config(tr_config);
    refdic::DatasetManifest m = refdic::load_manifest(tr_manifest);
    auto groups = refdic::group_index(refdic::load_groups(tr_groups));
    refdic::TrainOutcome out = refdic::train(cfg, m, groups, tr_out);
    ordered_json j{{"checkpoint_xe", out.checkpoint_xe},
                   {"checkpoint_best", out.checkpoint_best},
                   {"checkpoint_final", out.checkpoint_final},
                   {"metrics", out.metrics_path},
                   {"best_DisC", out.best_disc}};
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (gen->parsed()) {
    refdic::TransDic model = refdic::load_checkpoint(gen_ckpt);
    if (gen_max_len > model.config().max_len)
      throw refdic::DataError(
          "--max-len " + std::to_string(gen_max_len) +
          " exceeds the checkpoint's maximum caption length (" +
          std::to_string(model.config().max_len) + ")");
    refdic::DatasetManifest m = refdic::load_manifest(gen_manifest);
    auto groups = refdic::group_index(refdic::load_groups(gen_groups));
    auto cands =
        refdic::generate_captions(model, m, groups, gen_split, gen_beam, gen_max_len);
    if (cands.empty())
      throw refdic::DataError("generate: no " + gen_split +
                              "-split images with reference groups");
    write_candidates(cands, gen_out);
    std::cout << ordered_json{{"captions", gen_out}, {"count", cands.size()}}.dump()
              << "\n";
    return 0;
  }

  if (ab->parsed()) {
    refdic::TrainConfig base = load_train_config(ab_config);
    refdic::DatasetManifest m = refdic::load_manifest(ab_manifest);
    auto groups = refdic::group_index(refdic::load_groups(ab_groups));
    // default sweep: consensus-only baseline, single-metric mixes, and the
    // mixed setting at three margins
    std::vector<std::array<double, 3>> grid = {{0.0, 0.0, 0.0},  {0.5, 0.0, 4.0},
                                               {0.0, 1.0, 4.0},  {0.25, 0.5, 4.0},
                                               {0.25, 0.5, 2.0}, {0.25, 0.5, 8.0}};
    if (!ab_grid.empty()) {
      json g;
      try {
        g = json::parse(refdic::read_file_bytes(ab_grid));
      } catch (const json::exception& e) {
        throw refdic::DataError(ab_grid + ": invalid JSON: " + e.what());
      }
      if (!g.is_array() || g.empty())
        throw refdic::DataError(ab_grid + ": expected a non-empty array of rows");
      grid.clear();
      for (const auto& row : g) {
        if (!row.is_array() || row.size() != 3)
          throw refdic::DataError(ab_grid +
                                  ": each row must be [alpha_b, alpha_c, beta]");
        grid.push_back({row[0].get<double>(), row[1].get<double>(),
                        row[2].get<double>()});
      }
    }
    std::string work = ab_work.empty() ? ab_out + ".d" : ab_work;
    std::string csv = "alpha_b,alpha_c,beta,B-1,B-4,C,DisC\n";
    for (size_t i = 0; i < grid.size(); ++i) {
      refdic::TrainConfig cfg = base;
      cfg.reward.alpha_b = grid[i][0];
      cfg.reward.alpha_c = grid[i][1];
      cfg.reward.beta = grid[i][2];
      std::string row_dir = (fs::path(work) / ("row" + std::to_string(i))).string();
      refdic::log_msg(refdic::LogLevel::info,
                      "ablate: row " + std::to_string(i) + " (alpha_b=" +
                          fmt6(grid[i][0]) + ", alpha_c=" + fmt6(grid[i][1]) +
                          ", beta=" + fmt6(grid[i][2]) + ")");
      refdic::TrainOutcome out = refdic::train(cfg, m, groups, row_dir);
      if (out.log.empty())
        throw refdic::DataError("ablate: training produced no evaluations (zero steps?)");
      const ordered_json& last = out.log.back();
      csv += fmt6(grid[i][0]) + "," + fmt6(grid[i][1]) + "," + fmt6(grid[i][2]) +
             "," + fmt6(last.at("B-1").get<double>()) + "," +
             fmt6(last.at("B-4").get<double>()) + "," +
             fmt6(last.at("C").get<double>()) + "," +
             fmt6(last.at("DisC").get<double>()) + "\n";
    }
    refdic::write_file_bytes(ab_out, csv);
    std::cout << ordered_json{{"csv", ab_out}, {"rows", grid.size()}}.dump() << "\n";
    return 0;
  }

  return 0;  // unreachable: require_subcommand(1)
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const refdic::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
