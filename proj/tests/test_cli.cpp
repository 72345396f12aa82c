#include "dfe/image.hpp"
#include "support/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Workspace {
    fs::path root;

    explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("dfe_cli_" + name)) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }
};

int run(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(DFE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_frames(const fs::path& dir, int count, std::uint64_t seed) {
    fs::create_directories(dir);
    const dfe::Rgb8Image img = dfe::testing::textured_image(72, 64, seed);
    for (int k = 0; k < count; ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame%03d.png", k);
        dfe::write_png(img, dir / name);
    }
}

const std::string kSmallModel = "--width-divisor 4 --latent-dim 16";

} // namespace

TEST_CASE("train writes one loss row per epoch and reruns byte-identically") {
    Workspace ws("train");
    fs::create_directories(ws.root / "imgs");
    for (int k = 0; k < 3; ++k) {
        dfe::write_png(dfe::testing::textured_image(48, 40, 10 + k), ws.root / "imgs" / ("t" + std::to_string(k) + ".png"));
    }
    {
        std::ofstream cfg(ws.root / "train.json");
        cfg << R"({"images_dir": ")" << (ws.root / "imgs").string()
            << R"(", "epochs": 3, "batch_size": 8, "crops_per_image": 16, "seed": 5, "width_divisor": 4, "latent_dim": 16})";
    }
    const std::string base = "train -c " + (ws.root / "train.json").string();
    REQUIRE(run(base + " --checkpoint " + (ws.root / "a.ckpt").string(), ws.root / "log") == 0);
    REQUIRE(run(base + " --checkpoint " + (ws.root / "b.ckpt").string(), ws.root / "log") == 0);

    const std::string history = slurp(ws.root / "a.loss.csv");
    CHECK(std::count(history.begin(), history.end(), '\n') == 4); // header + 3 epochs
    CHECK(history == slurp(ws.root / "b.loss.csv"));
    CHECK(slurp(ws.root / "a.ckpt") == slurp(ws.root / "b.ckpt"));
    CHECK(slurp(ws.root / "log").find("final_loss") != std::string::npos);
}

TEST_CASE("missing input directory is a configuration error naming the path") {
    Workspace ws("missing");
    const fs::path bogus = ws.root / "no_such_dir";
    CHECK(run("train --seed 1 --checkpoint " + (ws.root / "x.ckpt").string() + " --images " + bogus.string(),
              ws.root / "log") == 2);
    CHECK(slurp(ws.root / "log").find(bogus.string()) != std::string::npos);
    CHECK(run("train -c " + (ws.root / "absent.json").string(), ws.root / "log") == 2);
}

TEST_CASE("tracking, evaluation and landscape through the command line") {
    Workspace ws("track");
    REQUIRE(run("train --images " + ws.root.string() + "/imgs --seed 2 --epochs 1 --checkpoint x", ws.root / "log") == 2);
    fs::create_directories(ws.root / "imgs");
    dfe::write_png(dfe::testing::textured_image(48, 48, 3), ws.root / "imgs" / "a.png");
    const std::string ckpt = (ws.root / "m.ckpt").string();
    REQUIRE(run("train --images " + (ws.root / "imgs").string() + " --seed 2 --epochs 1 --batch-size 8 " +
                    "--crops-per-image 16 " + kSmallModel + " --checkpoint " + ckpt,
                ws.root / "log") == 0);
    write_frames(ws.root / "frames", 4, 21);
    {
        std::ofstream gt(ws.root / "gt.csv");
        gt << "frame,x,y\n";
        for (int f = 1; f <= 4; ++f) gt << f << ",36,30\n";
        std::ofstream short_gt(ws.root / "gt_short.csv");
        short_gt << "frame,x,y\n1,36,30\n2,36,30\n";
    }
    const std::string common = "--checkpoint " + ckpt + " --frames " + (ws.root / "frames").string();

    SUBCASE("identical frames stay on the reference pixel") {
        REQUIRE(run("track " + common + " --ref-x 36 --ref-y 30 -o " + (ws.root / "t.csv").string() + " --gt " +
                        (ws.root / "gt.csv").string(),
                    ws.root / "log") == 0);
        std::ifstream in(ws.root / "t.csv");
        std::string line;
        std::getline(in, line);
        CHECK(line == "frame,x,y,ssr,refined");
        int rows = 0;
        std::string first;
        while (std::getline(in, line)) {
            ++rows;
            const std::string tail = line.substr(line.find(','));
            if (rows == 1) first = tail;
            CHECK(tail == first);
            CHECK(line.find(",0,") != std::string::npos); // ssr exactly zero
        }
        CHECK(rows == 4);
        CHECK(fs::exists(ws.root / "report" / "summary.csv"));
        CHECK(slurp(ws.root / "report" / "summary.csv").find(",0,\n") != std::string::npos);

        CHECK(run("eval --track " + (ws.root / "t.csv").string() + " --gt " + (ws.root / "gt.csv").string() +
                      " -o " + (ws.root / "rep").string(),
                  ws.root / "log") == 0);
        CHECK(slurp(ws.root / "rep" / "summary.csv") == slurp(ws.root / "report" / "summary.csv"));
    }
    SUBCASE("a frame without ground truth is a tracking failure naming the frame") {
        CHECK(run("track " + common + " --ref-x 36 --ref-y 30 --gt " + (ws.root / "gt_short.csv").string() + " -o " +
                      (ws.root / "t.csv").string(),
                  ws.root / "log") == 4);
        CHECK(slurp(ws.root / "log").find("frame 3") != std::string::npos);
    }
    SUBCASE("a reference point without a full crop is a tracking failure") {
        CHECK(run("track " + common + " --ref-x 3 --ref-y 30 -o " + (ws.root / "t.csv").string(), ws.root / "log") == 4);
    }
    SUBCASE("the landscape of the reference frame vanishes at the reference") {
        const fs::path out = ws.root / "land.csv";
        REQUIRE(run("landscape " + common + " --ref-x 36 --ref-y 30 --frame 1 -o " + out.string(), ws.root / "log") == 0);
        CHECK(slurp(ws.root / "log").find("argmin 36 30 ssr 0") != std::string::npos);
        CHECK(slurp(out).find("# argmin,36,30,0") != std::string::npos);
        CHECK(run("landscape " + common + " --ref-x 36 --ref-y 30 --frame 5", ws.root / "log") == 2);
    }
    SUBCASE("keep_every thins the sequence") {
        REQUIRE(run("track " + common + " --ref-x 36 --ref-y 30 --keep-every 2 -o " + (ws.root / "t.csv").string(),
                    ws.root / "log") == 0);
        const std::string csv = slurp(ws.root / "t.csv");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    }
}

TEST_CASE("diverging training exits with the training error code") {
    Workspace ws("diverge");
    fs::create_directories(ws.root / "imgs");
    dfe::write_png(dfe::testing::textured_image(40, 40, 4), ws.root / "imgs" / "a.png");
    CHECK(run("train --images " + (ws.root / "imgs").string() + " --seed 1 --epochs 2 --batch-size 8 " +
                  "--crops-per-image 16 --learning-rate 1e300 " + kSmallModel + " --checkpoint " +
                  (ws.root / "m.ckpt").string(),
              ws.root / "log") == 3);
}
