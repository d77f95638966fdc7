// Command-line front end: corpus generation, training, evaluation, and the
// frequency-analysis utilities. Exit codes: 0 success, 2 usage error, 3 data
// error, 4 numerical failure.
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "mswt/common.hpp"
#include "mswt/harness.hpp"

using namespace mswt;

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale wavelet transformer for face forgery detection"};
  app.require_subcommand(1);
  int rc = 0;

  // gen-corpus ------------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic forgery corpus");
  CorpusSpec spec;
  std::string gen_out = "corpus";
  gen->add_option("--seed", spec.seed, "Corpus seed");
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--train", spec.train, "Training frames (even)");
  gen->add_option("--val", spec.val, "Validation frames (even)");
  gen->add_option("--test", spec.test, "Test frames (even)");
  gen->add_option("--size", spec.size, "Image size (multiple of 8)");
  gen->add_option("--strength", spec.strength, "Manipulation blur sigma [0.5,3]");
  gen->callback([&] {
    Corpus c = make_corpus(spec, gen_out);
    std::printf("corpus written to %s (train %zu, val %zu, test %zu)\n", gen_out.c_str(),
                c.train.items.size(), c.val.items.size(), c.test.items.size());
  });

  // train -----------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a model");
  RunConfig tcfg;
  std::string config_path;
  std::string t_corpus, t_mode, t_out, t_eval_split, t_final_split;
  int t_iters = 0, t_batch = 0, t_step = 0, t_cadence = 0;
  double t_lr = 0;
  uint64_t t_seed = 0;
  tr->add_option("--config", config_path, "Flat key = value config file");
  tr->add_option("--corpus", t_corpus, "Corpus directory");
  tr->add_option("--mode", t_mode,
                 "full|backbone_only|dwt_concat|sa_only|fsa_only|cma_only");
  tr->add_option("--iters", t_iters, "Total iterations");
  tr->add_option("--batch", t_batch, "Batch size");
  tr->add_option("--lr", t_lr, "Base learning rate");
  tr->add_option("--step-size", t_step, "Halve the learning rate every N iterations");
  tr->add_option("--seed", t_seed, "Training seed");
  tr->add_option("--out", t_out, "Output directory");
  tr->add_option("--eval-cadence", t_cadence, "Evaluate every N iterations");
  tr->add_option("--eval-split", t_eval_split, "Split for periodic rows");
  tr->add_option("--final-split", t_final_split, "Split for the final row");
  tr->callback([&] {
    if (!config_path.empty()) apply_config(tcfg, parse_config_file(config_path));
    if (tr->count("--corpus")) tcfg.corpus_dir = t_corpus;
    if (tr->count("--mode")) tcfg.mode = t_mode;
    if (tr->count("--iters")) tcfg.iters = t_iters;
    if (tr->count("--batch")) tcfg.batch = t_batch;
    if (tr->count("--lr")) tcfg.lr = t_lr;
    if (tr->count("--step-size")) tcfg.step_size = t_step;
    if (tr->count("--seed")) tcfg.seed = t_seed;
    if (tr->count("--out")) tcfg.out_dir = t_out;
    if (tr->count("--eval-cadence")) tcfg.eval_cadence = t_cadence;
    if (tr->count("--eval-split")) tcfg.eval_split = t_eval_split;
    if (tr->count("--final-split")) tcfg.final_split = t_final_split;
    if (tcfg.corpus_dir.empty())
      throw std::invalid_argument("train: --corpus (or config key `corpus`) is required");
    TrainResult res = train(tcfg);
    std::printf("final %s: frame acc %.6f auc %.6f | video acc %.6f auc %.6f\n",
                tcfg.final_split.c_str(), res.final_frame.acc, res.final_frame.auc,
                res.final_video.acc, res.final_video.auc);
    std::printf("checkpoint: %s\nmetrics: %s\n", res.checkpoint_path.c_str(),
                res.metrics_path.c_str());
  });

  // eval ------------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
  std::string e_ckpt, e_corpus, e_split = "test";
  bool e_video_only = false;
  int e_batch = 24;
  ev->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
  ev->add_option("--corpus", e_corpus, "Corpus directory")->required();
  ev->add_option("--split", e_split, "Split name");
  ev->add_option("--batch", e_batch, "Evaluation batch size");
  ev->add_flag("--video-level", e_video_only, "Print only the video-level row");
  ev->callback([&] {
    MswtModel m = load_checkpoint(e_ckpt);
    CorpusSplit split = load_split(e_corpus, e_split);
    auto [f, v] = evaluate(m, split, e_batch);
    if (!e_video_only)
      std::printf("frame acc %.6f auc %.6f (%d frames)\n", f.acc, f.auc, f.n_frames);
    std::printf("video acc %.6f auc %.6f (%d videos)\n", v.acc, v.auc, v.n_videos);
  });

  // emd-analyze -----------------------------------------------------------------
  auto* emd = app.add_subcommand("emd-analyze", "Frequency-discrepancy report for a split");
  std::string m_corpus, m_split = "test", m_out = "report.csv";
  int m_levels = 3, m_bins = 64;
  emd->add_option("--corpus", m_corpus, "Corpus directory")->required();
  emd->add_option("--split", m_split, "Split name");
  emd->add_option("--levels", m_levels, "Decomposition depth");
  emd->add_option("--bins", m_bins, "Histogram bins");
  emd->add_option("--out", m_out, "Report CSV path");
  emd->callback([&] {
    CorpusSplit split = load_split(m_corpus, m_split);
    EmdReport rep = emd_report_for_split(split, m_levels, m_bins);
    write_emd_report(rep, m_out);
    for (auto& [name, val] : rep.rows) std::printf("%-8s %.6f\n", name.c_str(), val);
    std::printf("report written to %s\n", m_out.c_str());
  });

  // dwt-dump --------------------------------------------------------------------
  auto* dump = app.add_subcommand("dwt-dump", "Dump wavelet sub-bands of an image as PGMs");
  std::string d_image, d_out = "dwt";
  int d_levels = 3;
  dump->add_option("--image", d_image, "PPM image")->required();
  dump->add_option("--levels", d_levels, "Decomposition depth");
  dump->add_option("--out", d_out, "Output directory");
  dump->callback([&] {
    dwt_dump(read_ppm(d_image), d_levels, d_out);
    std::printf("sub-bands written to %s\n", d_out.c_str());
  });

  // gradcheck -------------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient smoke checks");
  std::string g_module = "all";
  gc->add_option("--module", g_module, "all|nn|wavelet|fsf|model");
  gc->callback([&] {
    std::string log;
    bool ok = gradcheck_module(g_module, log);
    std::fputs(log.c_str(), stdout);
    if (!ok) {
      std::fputs("gradcheck: FAILED\n", stdout);
      rc = 4;
    } else {
      std::fputs("gradcheck: all OK\n", stdout);
    }
  });

  // export-attention ------------------------------------------------------------
  auto* ex = app.add_subcommand("export-attention", "Write attention maps for one image");
  std::string x_ckpt, x_image, x_out = "attention";
  ex->add_option("--checkpoint", x_ckpt, "Checkpoint file")->required();
  ex->add_option("--image", x_image, "PPM image")->required();
  ex->add_option("--out", x_out, "Output directory");
  ex->callback([&] {
    MswtModel m = load_checkpoint(x_ckpt);
    export_attention(m, read_ppm(x_image), x_out);
    std::printf("attention maps written to %s\n", x_out.c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const data_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return rc;
}
